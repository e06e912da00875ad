//! Mixed-radix indexing for joint spaces.
//!
//! Component 0 is the most significant digit, so enumerating flat indices in
//! order enumerates component tuples lexicographically.

use alloc::vec;
use alloc::vec::Vec;

/// Cartesian product of finite per-agent sets, flattened to `0..size()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProductSpace {
    dims: Vec<usize>,
    strides: Vec<usize>,
    size: usize,
}

impl ProductSpace {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut strides = vec![0; dims.len()];
        let mut size = 1usize;
        for j in (0..dims.len()).rev() {
            strides[j] = size;
            size = size.checked_mul(dims[j]).expect("product space overflows usize");
        }
        Self { dims, strides, size }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self, j: usize) -> usize {
        self.dims[j]
    }

    pub fn encode(&self, parts: &[usize]) -> usize {
        debug_assert_eq!(parts.len(), self.dims.len());
        parts
            .iter()
            .zip(&self.strides)
            .zip(&self.dims)
            .map(|((&p, &s), &d)| {
                debug_assert!(p < d, "component {p} out of range {d}");
                p * s
            })
            .sum()
    }

    pub fn decode(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        self.decode_into(index, &mut out);
        out
    }

    pub fn decode_into(&self, index: usize, out: &mut [usize]) {
        for j in 0..self.dims.len() {
            out[j] = self.component(index, j);
        }
    }

    pub fn component(&self, index: usize, j: usize) -> usize {
        (index / self.strides[j]) % self.dims[j]
    }

    /// `index` with component `j` replaced by `value`.
    pub fn replace(&self, index: usize, j: usize, value: usize) -> usize {
        let old = self.component(index, j);
        index - old * self.strides[j] + value * self.strides[j]
    }

    pub fn stride(&self, j: usize) -> usize {
        self.strides[j]
    }
}

/// Joint state space: an optional shared environment component `S^0`
/// (observed identically by every agent) times per-agent local states.
///
/// Flat index = `shared * Π|S^j| + agents.encode(locals)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    shared: usize,
    agents: ProductSpace,
}

impl StateSpace {
    pub fn new(agent_states: Vec<usize>) -> Self {
        Self::with_shared(1, agent_states)
    }

    pub fn with_shared(shared: usize, agent_states: Vec<usize>) -> Self {
        assert!(shared >= 1, "shared component needs at least one value");
        Self { shared, agents: ProductSpace::new(agent_states) }
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn shared_size(&self) -> usize {
        self.shared
    }

    pub fn agent_size(&self, j: usize) -> usize {
        self.agents.dim(j)
    }

    pub fn agent_sizes(&self) -> &[usize] {
        self.agents.dims()
    }

    pub fn agents(&self) -> &ProductSpace {
        &self.agents
    }

    pub fn size(&self) -> usize {
        self.shared * self.agents.size()
    }

    pub fn encode(&self, shared: usize, locals: &[usize]) -> usize {
        debug_assert!(shared < self.shared);
        shared * self.agents.size() + self.agents.encode(locals)
    }

    pub fn shared_of(&self, index: usize) -> usize {
        index / self.agents.size()
    }

    pub fn local(&self, index: usize, j: usize) -> usize {
        self.agents.component(index % self.agents.size(), j)
    }

    pub fn locals(&self, index: usize) -> Vec<usize> {
        self.agents.decode(index % self.agents.size())
    }

    pub fn replace_local(&self, index: usize, j: usize, value: usize) -> usize {
        let shared = self.shared_of(index);
        let rest = index % self.agents.size();
        shared * self.agents.size() + self.agents.replace(rest, j, value)
    }

    /// Index into agent `j`'s option tables: its local state together with
    /// the shared component.
    pub fn policy_input(&self, index: usize, j: usize) -> usize {
        self.shared_of(index) * self.agents.dim(j) + self.local(index, j)
    }

    pub fn policy_inputs(&self, j: usize) -> usize {
        self.shared * self.agents.dim(j)
    }
}
