//! GCN and SGC node classifiers.

mod metrics;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{GraphVars, InjectedGraph};

pub use metrics::{evaluate, Metrics};
pub use train::{train, Optimizer, TrainConfig, TrainOutcome};

/// Architecture and its structural hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSpec {
    /// Two-layer GCN without bias.
    Gcn { hidden: usize },
    /// `Â^hops X W`.
    Sgc { hops: usize },
}

impl ModelSpec {
    pub const DEFAULT_GCN: ModelSpec = ModelSpec::Gcn { hidden: 16 };
    pub const DEFAULT_SGC: ModelSpec = ModelSpec::Sgc { hops: 2 };

    pub fn arch(&self) -> Arch {
        match self {
            ModelSpec::Gcn { .. } => Arch::Gcn,
            ModelSpec::Sgc { .. } => Arch::Sgc,
        }
    }

    pub fn shapes(&self, d: usize, c: usize) -> Vec<(usize, usize)> {
        match *self {
            ModelSpec::Gcn { hidden } => vec![(d, hidden), (hidden, c)],
            ModelSpec::Sgc { .. } => vec![(d, c)],
        }
    }

    /// Glorot-uniform weights.
    pub fn init(&self, d: usize, c: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = self
            .shapes(d, c)
            .into_iter()
            .map(|(r, k)| {
                let s = (6.0 / (r + k) as f64).sqrt();
                Matrix::from_fn(r, k, |_, _| rng.random_range(-s..=s))
            })
            .collect();
        ModelParams { spec: *self, weights }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gcn,
    Sgc,
}

impl Arch {
    pub fn default_spec(self) -> ModelSpec {
        match self {
            Arch::Gcn => ModelSpec::DEFAULT_GCN,
            Arch::Sgc => ModelSpec::DEFAULT_SGC,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Gcn => "gcn",
            Arch::Sgc => "sgc",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Arch::Gcn),
            "sgc" => Ok(Arch::Sgc),
            other => Err(Error::Unsupported(format!("architecture {other:?}; expected gcn or sgc"))),
        }
    }
}

/// Trained or initial weights of a [`ModelSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    weights: Vec<Matrix>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    arch: Arch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hops: Option<usize>,
    shapes: Vec<[usize; 2]>,
    weights: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn new(spec: ModelSpec, weights: Vec<Matrix>) -> Result<Self> {
        let ok = match spec {
            ModelSpec::Gcn { hidden } => {
                weights.len() == 2 && weights[0].cols() == hidden && weights[1].rows() == hidden
            }
            ModelSpec::Sgc { .. } => weights.len() == 1,
        };
        if !ok {
            let shapes: Vec<_> = weights.iter().map(Matrix::shape).collect();
            return Err(Error::Shape(format!("{spec:?} cannot hold weights {shapes:?}")));
        }
        if !weights.iter().all(Matrix::is_finite) {
            return Err(Error::invalid("non-finite weight"));
        }
        Ok(Self { spec, weights })
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn d(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn c(&self) -> usize {
        self.weights[self.weights.len() - 1].cols()
    }

    /// Records the weights as leaves.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Var> {
        self.weights.iter().map(|w| tape.leaf(w.clone())).collect()
    }

    /// Logits over every node of `graph`.
    pub fn logits(&self, graph: &InjectedGraph) -> Result<Matrix> {
        let mut tape = Tape::new();
        let gv = graph.attach(&mut tape)?;
        let w = self.attach(&mut tape);
        let z = forward(&mut tape, self.spec, &gv, &w)?;
        Ok(tape.value(z).clone())
    }

    /// Argmax predictions for `nodes`, ties toward the lowest class.
    pub fn predict(&self, graph: &InjectedGraph, nodes: &[usize]) -> Result<Vec<usize>> {
        let z = self.logits(graph)?;
        let all = z.argmax_rows();
        Ok(nodes.iter().map(|&v| all[v]).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            arch: self.spec.arch(),
            hops: match self.spec {
                ModelSpec::Sgc { hops } => Some(hops),
                ModelSpec::Gcn { .. } => None,
            },
            shapes: self.weights.iter().map(|w| [w.rows(), w.cols()]).collect(),
            weights: self.weights.iter().map(|w| w.as_slice().to_vec()).collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.shapes.len() != ck.weights.len() {
            return Err(Error::Shape(format!("{} shapes for {} weights", ck.shapes.len(), ck.weights.len())));
        }
        let mut weights = Vec::with_capacity(ck.weights.len());
        for ([r, c], data) in ck.shapes.into_iter().zip(ck.weights) {
            if data.len() != r * c {
                return Err(Error::Shape(format!("{} values for a {r}x{c} weight", data.len())));
            }
            weights.push(Matrix::from_vec(r, c, data));
        }
        let spec = match ck.arch {
            Arch::Gcn => ModelSpec::Gcn { hidden: weights.first().map_or(0, Matrix::cols) },
            Arch::Sgc => ModelSpec::Sgc { hops: ck.hops.unwrap_or(2) },
        };
        Self::new(spec, weights)
    }
}

/// `Â relu(Â X W1) W2`.
pub fn gcn_forward(tape: &mut Tape, graph: &GraphVars, w1: Var, w2: Var) -> Result<Var> {
    let xw = graph.features.project(tape, w1)?;
    let h = graph.prop.apply(tape, xw)?;
    let h = tape.relu(h)?;
    let hw = tape.matmul(h, w2)?;
    graph.prop.apply(tape, hw)
}

/// `Â^hops X W`.
pub fn sgc_forward(tape: &mut Tape, graph: &GraphVars, w: Var, hops: usize) -> Result<Var> {
    let mut z = graph.features.project(tape, w)?;
    for _ in 0..hops {
        z = graph.prop.apply(tape, z)?;
    }
    Ok(z)
}

/// Logits for `weights` laid out as [`ModelSpec::shapes`].
pub fn forward(tape: &mut Tape, spec: ModelSpec, graph: &GraphVars, weights: &[Var]) -> Result<Var> {
    match (spec, weights) {
        (ModelSpec::Gcn { .. }, &[w1, w2]) => gcn_forward(tape, graph, w1, w2),
        (ModelSpec::Sgc { hops }, &[w]) => sgc_forward(tape, graph, w, hops),
        _ => Err(Error::Shape(format!("{spec:?} given {} weight tensors", weights.len()))),
    }
}

/// Surrogate argmax labels on `nodes`.
pub fn pseudo_labels(surrogate: &ModelParams, graph: &InjectedGraph, nodes: &[usize]) -> Result<Vec<usize>> {
    surrogate.predict(graph, nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, InjectionPlan, Split};

    fn lone_node() -> (Graph, Split, InjectionPlan) {
        let g = Graph::new("one", Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]), vec![0], 2, vec![]).unwrap();
        (g, Split::from_mask(vec![true]), InjectionPlan::empty(1, 3, 0))
    }

    #[test]
    fn zero_first_layer_gives_zero_logits() {
        let (g, s, p) = lone_node();
        let inj = InjectedGraph::new(&g, &s, &p).unwrap();
        let mut params = ModelSpec::Gcn { hidden: 4 }.init(3, 2, 0);
        params.weights[0] = Matrix::zeros(3, 4);
        assert_eq!(params.logits(&inj).unwrap(), Matrix::zeros(1, 2));
    }

    #[test]
    fn isolated_node_is_an_mlp() {
        let (g, s, p) = lone_node();
        let inj = InjectedGraph::new(&g, &s, &p).unwrap();
        let params = ModelSpec::Gcn { hidden: 4 }.init(3, 2, 3);
        let h = g.features().matmul(&params.weights[0]).map(|x| x.max(0.0));
        let expect = h.matmul(&params.weights[1]);
        assert_eq!(params.logits(&inj).unwrap(), expect);
    }

    #[test]
    fn sgc_zero_hops_is_linear() {
        let (g, s, p) = lone_node();
        let inj = InjectedGraph::new(&g, &s, &p).unwrap();
        let params = ModelSpec::Sgc { hops: 0 }.init(3, 2, 1);
        assert_eq!(params.logits(&inj).unwrap(), g.features().matmul(&params.weights[0]));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelSpec::DEFAULT_GCN.init(10, 3, 5);
        assert_eq!(a, ModelSpec::DEFAULT_GCN.init(10, 3, 5));
        assert_ne!(a, ModelSpec::DEFAULT_GCN.init(10, 3, 6));
        let s = (6.0f64 / 26.0).sqrt();
        assert!(a.weights[0].as_slice().iter().all(|x| x.abs() <= s));
    }

    #[test]
    fn checkpoint_round_trip() {
        for spec in [ModelSpec::DEFAULT_GCN, ModelSpec::Sgc { hops: 3 }] {
            let p = spec.init(5, 3, 2);
            let back = ModelParams::from_json(&p.to_json().unwrap()).unwrap();
            assert_eq!(p, back);
        }
        let json = ModelSpec::DEFAULT_GCN.init(5, 3, 2).to_json().unwrap();
        assert!(json.starts_with(r#"{"arch":"gcn","shapes":[[5,16],[16,3]],"weights":"#));
    }

    #[test]
    fn arch_parsing() {
        assert_eq!("sgc".parse::<Arch>().unwrap(), Arch::Sgc);
        assert!("gat".parse::<Arch>().is_err());
    }
}
