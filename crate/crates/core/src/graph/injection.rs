use serde::{Deserialize, Serialize};

use super::propagate::{Features, GraphVars, Propagator};
use super::{Graph, Split, DESK_SCALE_LIMIT};
use crate::engine::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Attacker artifact: injected features, edge blocks and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionPlan {
    x_inj: Matrix,
    inter: Matrix,
    intra: Matrix,
    labels: Vec<usize>,
    budget: usize,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    m: usize,
    budget: usize,
    labels: Vec<usize>,
    x_inj: Vec<Vec<f64>>,
    inter_edges: Vec<[usize; 2]>,
    intra_edges: Vec<[usize; 2]>,
}

impl InjectionPlan {
    /// `inter` is m x n, `intra` m x m symmetric with zero diagonal, all
    /// entries in `[0, 1]`.
    pub fn new(x_inj: Matrix, inter: Matrix, intra: Matrix, labels: Vec<usize>, budget: usize) -> Result<Self> {
        let m = labels.len();
        if x_inj.rows() != m || inter.rows() != m || intra.shape() != (m, m) {
            return Err(Error::Shape(format!(
                "{m} labels, x_inj {:?}, inter {:?}, intra {:?}",
                x_inj.shape(),
                inter.shape(),
                intra.shape()
            )));
        }
        if !x_inj.is_finite() {
            return Err(Error::invalid("non-finite injected feature"));
        }
        let in_unit = |x: &f64| (0.0..=1.0).contains(x);
        if !inter.as_slice().iter().all(in_unit) || !intra.as_slice().iter().all(in_unit) {
            return Err(Error::invalid("edge weights must lie in [0, 1]"));
        }
        for i in 0..m {
            if intra.get(i, i) != 0.0 {
                return Err(Error::invalid(format!("intra self-loop on injected node {i}")));
            }
            for j in 0..i {
                if intra.get(i, j) != intra.get(j, i) {
                    return Err(Error::invalid(format!("intra block asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { x_inj, inter, intra, labels, budget })
    }

    /// No injected nodes.
    pub fn empty(n: usize, d: usize, budget: usize) -> Self {
        Self {
            x_inj: Matrix::zeros(0, d),
            inter: Matrix::zeros(0, n),
            intra: Matrix::zeros(0, 0),
            labels: Vec::new(),
            budget,
        }
    }

    /// Binary plan from edge lists.
    pub fn from_edges(
        n: usize,
        x_inj: Matrix,
        labels: Vec<usize>,
        inter_edges: &[(usize, usize)],
        intra_edges: &[(usize, usize)],
        budget: usize,
    ) -> Result<Self> {
        let m = labels.len();
        let mut inter = Matrix::zeros(m, n);
        for &(i, j) in inter_edges {
            if i >= m || j >= n {
                return Err(Error::invalid(format!("inter edge ({i}, {j}) out of range for m = {m}, n = {n}")));
            }
            if inter.get(i, j) != 0.0 {
                return Err(Error::invalid(format!("duplicate inter edge ({i}, {j})")));
            }
            inter.set(i, j, 1.0);
        }
        let mut intra = Matrix::zeros(m, m);
        for &(i, j) in intra_edges {
            if i >= m || j >= m || i == j {
                return Err(Error::invalid(format!("bad intra edge ({i}, {j}) for m = {m}")));
            }
            if intra.get(i, j) != 0.0 {
                return Err(Error::invalid(format!("duplicate intra edge ({i}, {j})")));
            }
            intra.set(i, j, 1.0);
            intra.set(j, i, 1.0);
        }
        Self::new(x_inj, inter, intra, labels, budget)
    }

    pub fn m(&self) -> usize {
        self.labels.len()
    }

    pub fn n(&self) -> usize {
        self.inter.cols()
    }

    pub fn d(&self) -> usize {
        self.x_inj.cols()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn x_inj(&self) -> &Matrix {
        &self.x_inj
    }

    pub fn inter(&self) -> &Matrix {
        &self.inter
    }

    pub fn intra(&self) -> &Matrix {
        &self.intra
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn is_binary(&self) -> bool {
        let bin = |x: &f64| *x == 0.0 || *x == 1.0;
        self.inter.as_slice().iter().all(bin) && self.intra.as_slice().iter().all(bin)
    }

    /// Row sums of `[A_inter | A_intra]`.
    pub fn row_degrees(&self) -> Vec<f64> {
        (0..self.m()).map(|i| self.inter.row(i).iter().sum::<f64>() + self.intra.row(i).iter().sum::<f64>()).collect()
    }

    pub fn within_budget(&self) -> bool {
        self.row_degrees().iter().all(|&d| d <= self.budget as f64)
    }

    /// `(injected row, original node)` pairs with a non-zero entry.
    pub fn inter_edges(&self) -> Vec<(usize, usize)> {
        (0..self.m())
            .flat_map(|i| (0..self.n()).filter(move |&j| self.inter.get(i, j) != 0.0).map(move |j| (i, j)))
            .collect()
    }

    /// `(i, j)` with `i < j` and a non-zero intra entry.
    pub fn intra_edges(&self) -> Vec<(usize, usize)> {
        (0..self.m())
            .flat_map(|i| (i + 1..self.m()).filter(move |&j| self.intra.get(i, j) != 0.0).map(move |j| (i, j)))
            .collect()
    }

    /// Same plan with different injected features.
    pub fn with_features(&self, x_inj: Matrix) -> Result<Self> {
        Self::new(x_inj, self.inter.clone(), self.intra.clone(), self.labels.clone(), self.budget)
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.is_binary() {
            return Err(Error::invalid("only binary plans serialize to edge lists"));
        }
        let file = PlanFile {
            m: self.m(),
            budget: self.budget,
            labels: self.labels.clone(),
            x_inj: (0..self.m()).map(|i| self.x_inj.row(i).to_vec()).collect(),
            inter_edges: self.inter_edges().into_iter().map(|(i, j)| [i, j]).collect(),
            intra_edges: self.intra_edges().into_iter().map(|(i, j)| [i, j]).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parses a plan for a graph with `n` original nodes and `d` features.
    pub fn from_json(s: &str, n: usize, d: usize) -> Result<Self> {
        let file: PlanFile = serde_json::from_str(s)?;
        if file.labels.len() != file.m || file.x_inj.len() != file.m {
            return Err(Error::Shape(format!(
                "m = {} with {} labels and {} feature rows",
                file.m,
                file.labels.len(),
                file.x_inj.len()
            )));
        }
        if file.x_inj.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!("injected feature rows must have d = {d} entries")));
        }
        let x = if file.m == 0 { Matrix::zeros(0, d) } else { Matrix::from_rows(&file.x_inj) };
        let pairs = |v: Vec<[usize; 2]>| v.into_iter().map(|[i, j]| (i, j)).collect::<Vec<_>>();
        Self::from_edges(n, x, file.labels, &pairs(file.inter_edges), &pairs(file.intra_edges), file.budget)
    }
}

fn check_plan(graph: &Graph, split: &Split, plan: &InjectionPlan) -> Result<()> {
    if plan.n() != graph.n() || plan.d() != graph.d() {
        return Err(Error::Shape(format!(
            "plan built for n = {}, d = {}; graph has n = {}, d = {}",
            plan.n(),
            plan.d(),
            graph.n(),
            graph.d()
        )));
    }
    if split.n() != graph.n() {
        return Err(Error::Shape(format!("split covers {} nodes, graph has {}", split.n(), graph.n())));
    }
    if let Some(&y) = plan.labels().iter().find(|&&y| y >= graph.c()) {
        return Err(Error::invalid(format!("injected label {y} out of range for {} classes", graph.c())));
    }
    Ok(())
}

/// Original graph plus an injection plan, with every injected node labeled.
#[derive(Clone, Debug)]
pub struct InjectedGraph<'a> {
    graph: &'a Graph,
    plan: &'a InjectionPlan,
    labels: Vec<usize>,
    split: Split,
}

impl<'a> InjectedGraph<'a> {
    pub fn new(graph: &'a Graph, split: &Split, plan: &'a InjectionPlan) -> Result<Self> {
        check_plan(graph, split, plan)?;
        let size = graph.n() + plan.m();
        if size > DESK_SCALE_LIMIT {
            return Err(Error::TooLarge { nodes: size, limit: DESK_SCALE_LIMIT });
        }
        let labels = graph.labels().iter().chain(plan.labels()).copied().collect();
        let mut mask = split.mask().to_vec();
        mask.resize(size, true);
        Ok(Self { graph, plan, labels, split: Split::from_mask(mask) })
    }

    pub fn graph(&self) -> &'a Graph {
        self.graph
    }

    pub fn plan(&self) -> &'a InjectionPlan {
        self.plan
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn m(&self) -> usize {
        self.plan.m()
    }

    pub fn size(&self) -> usize {
        self.n() + self.m()
    }

    pub fn c(&self) -> usize {
        self.graph.c()
    }

    /// Labels over all `n + m` nodes.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Split over all `n + m` nodes; injected nodes are labeled.
    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn labeled_nodes(&self) -> Vec<usize> {
        self.split.labeled_nodes()
    }

    /// Unlabeled original nodes, the evaluation population.
    pub fn test_nodes(&self) -> Vec<usize> {
        self.split.unlabeled_nodes()
    }

    pub fn injected_nodes(&self) -> Vec<usize> {
        (self.n()..self.size()).collect()
    }

    /// Records the graph with the plan's blocks as constants.
    pub fn attach(&self, tape: &mut Tape) -> Result<GraphVars> {
        let x = tape.leaf(self.plan.x_inj.clone());
        let inter = tape.leaf(self.plan.inter.clone());
        let intra = tape.leaf(self.plan.intra.clone());
        self.attach_with(tape, x, inter, intra)
    }

    /// Records the graph with caller-supplied injected blocks.
    pub fn attach_with(&self, tape: &mut Tape, x_inj: Var, inter: Var, intra: Var) -> Result<GraphVars> {
        self.check_vars(x_inj, inter, intra)?;
        let prop = Propagator::blocks(tape, self.graph.adjacency(), inter, intra)?;
        let features = Features::Blocks { base: std::sync::Arc::clone(self.graph.feature_operator()), injected: x_inj };
        Ok(GraphVars { prop, features })
    }

    /// Same as [`attach_with`](Self::attach_with) but through the explicit
    /// `(n + m) x (n + m)` adjacency. Only sensible for small graphs.
    pub fn attach_dense_with(&self, tape: &mut Tape, x_inj: Var, inter: Var, intra: Var) -> Result<GraphVars> {
        self.check_vars(x_inj, inter, intra)?;
        let a = tape.leaf(self.graph.adjacency().to_dense());
        let x = tape.leaf(self.graph.features().clone());
        let inter_t = tape.transpose(inter)?;
        let adj = tape.block2x2(a, inter_t, inter, intra)?;
        let feats = tape.stack_rows(x, x_inj)?;
        let prop = Propagator::dense(tape, adj)?;
        Ok(GraphVars { prop, features: Features::Dense(feats) })
    }

    fn check_vars(&self, x_inj: Var, inter: Var, intra: Var) -> Result<()> {
        let (n, m, d) = (self.n(), self.m(), self.graph.d());
        if x_inj.shape() != (m, d) || inter.shape() != (m, n) || intra.shape() != (m, m) {
            return Err(Error::Shape(format!(
                "expected x_inj {m}x{d}, inter {m}x{n}, intra {m}x{m}; got {:?}, {:?}, {:?}",
                x_inj.shape(),
                inter.shape(),
                intra.shape()
            )));
        }
        Ok(())
    }

    /// Explicit graph over all `n + m` nodes. Requires a binary plan.
    pub fn materialize(&self) -> Result<(Graph, Split)> {
        if !self.plan.is_binary() {
            return Err(Error::invalid("cannot materialize a continuous plan"));
        }
        let n = self.n();
        let mut edges = self.graph.edges().to_vec();
        edges.extend(self.plan.inter_edges().into_iter().map(|(i, j)| (j, n + i)));
        edges.extend(self.plan.intra_edges().into_iter().map(|(i, j)| (n + i, n + j)));
        let mut features = Matrix::zeros(self.size(), self.graph.d());
        features.paste(0, 0, self.graph.features());
        features.paste(n, 0, &self.plan.x_inj);
        let g = Graph::new(self.graph.name(), features, self.labels.clone(), self.c(), edges)?;
        Ok((g, self.split.clone()))
    }
}

/// Dense block form of an injected graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Assembled {
    pub adjacency: Matrix,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub split: Split,
}

/// `[[A, A_inter^T], [A_inter, A_intra]]` with features stacked over `X_inj`.
pub fn assemble_injected(graph: &Graph, split: &Split, plan: &InjectionPlan) -> Result<Assembled> {
    let inj = InjectedGraph::new(graph, split, plan)?;
    let (n, m) = (inj.n(), inj.m());
    let mut adjacency = Matrix::zeros(n + m, n + m);
    adjacency.paste(0, 0, &graph.adjacency().to_dense());
    adjacency.paste(0, n, &plan.inter.transpose());
    adjacency.paste(n, 0, &plan.inter);
    adjacency.paste(n, n, &plan.intra);
    let mut features = Matrix::zeros(n + m, graph.d());
    features.paste(0, 0, graph.features());
    features.paste(n, 0, &plan.x_inj);
    Ok(Assembled { adjacency, features, labels: inj.labels.clone(), split: inj.split.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Graph, Split) {
        let g = Graph::new("toy", Matrix::identity(3), vec![0, 1, 1], 2, vec![(0, 1), (1, 2)]).unwrap();
        (g, Split::from_mask(vec![true, true, false]))
    }

    #[test]
    fn empty_plan_is_identity() {
        let (g, s) = toy();
        let a = assemble_injected(&g, &s, &InjectionPlan::empty(3, 3, 5)).unwrap();
        assert_eq!(a.adjacency, g.adjacency().to_dense());
        assert_eq!(&a.features, g.features());
        assert_eq!(a.split, s);
    }

    #[test]
    fn single_inter_edge_symmetric() {
        let (g, s) = toy();
        let plan = InjectionPlan::from_edges(3, Matrix::zeros(1, 3), vec![1], &[(0, 0)], &[], 5).unwrap();
        let a = assemble_injected(&g, &s, &plan).unwrap();
        assert_eq!(a.adjacency.get(0, 3), 1.0);
        assert_eq!(a.adjacency.get(3, 0), 1.0);
        assert_eq!(a.split.mask(), &[true, true, false, true]);
        assert_eq!(a.labels, vec![0, 1, 1, 1]);
    }

    #[test]
    fn plan_validation() {
        let bad_intra = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert!(InjectionPlan::new(Matrix::zeros(2, 1), Matrix::zeros(2, 3), bad_intra, vec![0, 0], 1).is_err());
        let out_of_unit = Matrix::filled(1, 3, 1.5);
        assert!(InjectionPlan::new(Matrix::zeros(1, 1), out_of_unit, Matrix::zeros(1, 1), vec![0], 1).is_err());
        let (g, s) = toy();
        let wrong_d = InjectionPlan::empty(3, 2, 1);
        assert!(matches!(assemble_injected(&g, &s, &wrong_d), Err(Error::Shape(_))));
    }

    #[test]
    fn json_round_trip() {
        let x = Matrix::from_rows(&[vec![0.5, 0.0, 1.0], vec![0.0, 0.25, 0.0]]);
        let plan = InjectionPlan::from_edges(3, x, vec![0, 1], &[(0, 2), (1, 0)], &[(0, 1)], 2).unwrap();
        let back = InjectionPlan::from_json(&plan.to_json().unwrap(), 3, 3).unwrap();
        assert_eq!(plan, back);
        assert!(plan.within_budget());
    }

    #[test]
    fn materialize_matches_assembly() {
        let (g, s) = toy();
        let plan = InjectionPlan::from_edges(3, Matrix::filled(2, 3, 0.5), vec![0, 1], &[(0, 2), (1, 0)], &[(0, 1)], 2)
            .unwrap();
        let inj = InjectedGraph::new(&g, &s, &plan).unwrap();
        let (full, split) = inj.materialize().unwrap();
        let a = assemble_injected(&g, &s, &plan).unwrap();
        assert_eq!(full.adjacency().to_dense(), a.adjacency);
        assert_eq!(full.features(), &a.features);
        assert_eq!(split, a.split);
    }
}
