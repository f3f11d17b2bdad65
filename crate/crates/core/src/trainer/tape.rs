//! Minimal reverse-mode autodiff tape over scalar f64 operations.
//!
//! Each node stores at most two parents with the local partials evaluated
//! at forward time; backpropagation is a single reverse sweep. Leaves are
//! created first and their adjoints read out after `backward`.

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) u32);

#[derive(Debug, Clone, Copy)]
struct Node {
    p0: u32,
    p1: u32,
    d0: f64,
    d1: f64,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.0 as usize]
    }

    fn push(&mut self, val: f64, p0: u32, p1: u32, d0: f64, d1: f64) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { p0, p1, d0, d1 });
        self.vals.push(val);
        Var(idx)
    }

    pub fn leaf(&mut self, val: f64) -> Var {
        self.push(val, NONE, NONE, 0.0, 0.0)
    }

    pub fn constant(&mut self, val: f64) -> Var {
        self.leaf(val)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(self.value(a) + self.value(b), a.0, b.0, 1.0, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(self.value(a) - self.value(b), a.0, b.0, 1.0, -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va * vb, a.0, b.0, vb, va)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va / vb, a.0, b.0, 1.0 / vb, -va / (vb * vb))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(-self.value(a), a.0, NONE, -1.0, 0.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.push(e, a.0, NONE, e, 0.0)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a);
        self.push(v.ln(), a.0, NONE, 1.0 / v, 0.0)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let s = self.value(a).sqrt();
        self.push(s, a.0, NONE, 0.5 / s, 0.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let sign = if v < 0.0 { -1.0 } else { 1.0 };
        self.push(v.abs(), a.0, NONE, sign, 0.0)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        if self.value(a) >= self.value(b) {
            self.push(self.value(a), a.0, b.0, 1.0, 0.0)
        } else {
            self.push(self.value(b), a.0, b.0, 0.0, 1.0)
        }
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        if self.value(a) <= self.value(b) {
            self.push(self.value(a), a.0, b.0, 1.0, 0.0)
        } else {
            self.push(self.value(b), a.0, b.0, 0.0, 1.0)
        }
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.push(self.value(a) + c, a.0, NONE, 1.0, 0.0)
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        self.push(self.value(a) * c, a.0, NONE, c, 0.0)
    }

    /// Lower clamp against a constant; zero gradient when clamped.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        if v >= c {
            self.push(v, a.0, NONE, 1.0, 0.0)
        } else {
            self.push(c, a.0, NONE, 0.0, 0.0)
        }
    }

    /// Adjoints of every node with respect to `output`.
    pub fn backward(&self, output: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.nodes.len()];
        adj[output.0 as usize] = 1.0;
        for i in (0..=output.0 as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &self.nodes[i];
            if node.p0 != NONE {
                adj[node.p0 as usize] += node.d0 * a;
            }
            if node.p1 != NONE {
                adj[node.p1 as usize] += node.d1 * a;
            }
        }
        adj
    }
}
