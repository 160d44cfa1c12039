use rand::Rng;

use super::{Gradients, Graph, Padding, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters enter the graph as constants and are skipped by the
    /// optimizer.
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Handles in store order, e.g. leaves created by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter {
            name,
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar values, optionally only the trainable ones.
    pub fn num_values(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }

    /// Marks every parameter whose name matches one of the glob `patterns` as
    /// frozen. Each pattern has to match at least one parameter.
    pub fn freeze(&mut self, patterns: &[String]) -> Result<usize> {
        let mut count = 0;
        for pat in patterns {
            let glob = glob::Pattern::new(pat)
                .map_err(|e| Error::config(format!("bad freeze pattern {pat:?}: {e}")))?;
            let mut hit = false;
            for p in &mut self.params {
                if glob.matches(&p.name) {
                    hit = true;
                    if !p.frozen {
                        p.frozen = true;
                        count += 1;
                    }
                }
            }
            if !hit {
                return Err(Error::config(format!("freeze pattern {pat:?} matches no parameter")));
            }
        }
        Ok(count)
    }

    /// Places every parameter on `g`: trainable ones as leaves, frozen ones as
    /// constants.
    pub fn bind(&self, g: &Graph) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.frozen {
                    g.constant(p.value.clone())
                } else {
                    g.leaf(p.value.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Gradients for each parameter in store order (`None` for frozen or
    /// unused parameters).
    pub fn collect_grads(&self, bound: &BoundParams, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    /// Replaces values from `(name, tensor)` entries; names and shapes must
    /// match the store exactly.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (p, (name, t)) in self.params.iter().zip(&entries) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "checkpoint entry {name} {:?} does not match parameter {} {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(entries) {
            p.value = t;
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weight `[cin, cout]` and bias drawn from `U(-1/√cin, 1/√cin)`.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (cin.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[cin, cout], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[cout], bound));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var> {
        g.linear(x, p.get(self.weight), Some(p.get(self.bias)))
    }
}

/// `fc2(relu(fc1(x)))`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, hidden: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), cin, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, cout, rng),
        }
    }

    pub fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, p, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[cout, cin, kernel, kernel], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[cout], bound)));
        Self { weight, bias, stride }
    }

    pub fn forward(&self, g: &Graph, p: &BoundParams, x: Var, padding: Padding) -> Result<Var> {
        g.conv2d(x, p.get(self.weight), self.bias.map(|b| p.get(b)), self.stride, padding)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var> {
        g.group_norm(x, self.groups, p.get(self.gamma), p.get(self.beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("backbone.stem.weight", Tensor::zeros(&[2]));
        s.add("backbone.stem.bias", Tensor::zeros(&[2]));
        s.add("head.lidar.fc1.weight", Tensor::zeros(&[1]));
        s
    }

    #[test]
    fn freeze_by_glob() {
        let mut s = store();
        assert_eq!(s.freeze(&["backbone.*".into()]).unwrap(), 2);
        let frozen: Vec<bool> = s.iter().map(|p| p.frozen).collect();
        assert_eq!(frozen, [true, true, false]);
        assert!(matches!(s.freeze(&["nothing.*".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_parameters_bind_as_constants() {
        let mut s = store();
        s.freeze(&["head.*".into()]).unwrap();
        let g = Graph::new();
        let b = s.bind(&g);
        assert!(g.requires_grad(b.vars()[0]));
        assert!(!g.requires_grad(b.vars()[2]));
    }

    #[test]
    fn load_values_checks_names_and_shapes() {
        let mut s = store();
        let mut entries: Vec<(String, Tensor)> = s.iter().map(|p| (p.name.clone(), p.value.map(|_| 1.0))).collect();
        s.clone().load_values(entries.clone()).unwrap();
        entries[2].1 = Tensor::zeros(&[3]);
        assert!(s.load_values(entries).is_err());
    }
}
