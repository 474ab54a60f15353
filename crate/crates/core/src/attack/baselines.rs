use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::Matrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, InjectionPlan, Split};

/// Heuristic injection strategies, also used to initialize the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Random,
    Copy,
    NewCopy,
    TestCopy,
    TestLink,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Random,
        BaselineKind::Copy,
        BaselineKind::NewCopy,
        BaselineKind::TestCopy,
        BaselineKind::TestLink,
    ];
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Random => "random",
            BaselineKind::Copy => "copy",
            BaselineKind::NewCopy => "newcopy",
            BaselineKind::TestCopy => "testcopy",
            BaselineKind::TestLink => "testlink",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Unsupported(format!("baseline {s:?}")))
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, pool: &[T], k: usize) -> Vec<T> {
    let mut idx = sample(rng, pool.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i]).collect()
}

/// Neighbors of `v` cut down to `budget` at random, keeping preferred ones first.
fn copied_edges(graph: &Graph, v: usize, budget: usize, prefer: Option<&Split>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut nbrs: Vec<usize> = graph.neighbors(v).collect();
    nbrs.shuffle(rng);
    if let Some(split) = prefer {
        nbrs.sort_by_key(|&u| split.is_labeled(u));
    }
    nbrs.truncate(budget);
    nbrs
}

fn moment_matched_features(graph: &Graph, m: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let (n, d) = (graph.n(), graph.d());
    let x = graph.features();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(x.row(i)).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        var.iter_mut().zip(x.row(i)).zip(&mean).for_each(|((s, b), mu)| *s += (b - mu) * (b - mu));
    }
    let dists: Vec<Normal<f64>> = var
        .iter()
        .zip(&mean)
        .map(|(s, &mu)| Normal::new(mu, (s / n as f64).sqrt()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::invalid(format!("feature moments: {e}")))?;
    let mut out = Matrix::zeros(m, d);
    for i in 0..m {
        for (o, dist) in out.row_mut(i).iter_mut().zip(&dists) {
            *o = dist.sample(rng);
        }
    }
    Ok(out)
}

/// Builds one of the heuristic injection plans with `m` nodes of degree at
/// most `budget`.
pub fn baseline_inject(
    graph: &Graph,
    split: &Split,
    kind: BaselineKind,
    m: usize,
    budget: usize,
    seed: u64,
) -> Result<InjectionPlan> {
    let n = graph.n();
    if m == 0 {
        return Err(Error::invalid("baseline injection needs m >= 1"));
    }
    if budget == 0 {
        return Err(Error::invalid("edge budget must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labeled = split.labeled_nodes();
    let unlabeled = split.unlabeled_nodes();
    let need = |pool: &[usize], what: &str| {
        if m > pool.len() {
            Err(Error::invalid(format!("{kind} needs {m} {what} nodes, only {} available", pool.len())))
        } else {
            Ok(())
        }
    };

    let (sources, labels, edges): (Option<Vec<usize>>, Vec<usize>, Vec<Vec<usize>>) = match kind {
        BaselineKind::Random => {
            let b = budget.min(n);
            let edges = (0..m).map(|_| pick(&mut rng, &(0..n).collect::<Vec<_>>(), b)).collect();
            let labels = (0..m).map(|_| rng.random_range(0..graph.c())).collect();
            (None, labels, edges)
        }
        BaselineKind::Copy => {
            need(&labeled, "labeled")?;
            let src = pick(&mut rng, &labeled, m);
            let edges = src.iter().map(|&v| copied_edges(graph, v, budget, None, &mut rng)).collect();
            let labels = src.iter().map(|&v| graph.labels()[v]).collect();
            (Some(src), labels, edges)
        }
        BaselineKind::NewCopy => {
            need(&labeled, "labeled")?;
            let mut ranked = labeled.clone();
            let to_unlabeled = |v: usize| graph.neighbors(v).filter(|&u| !split.is_labeled(u)).count();
            ranked.sort_by(|&a, &b| to_unlabeled(b).cmp(&to_unlabeled(a)).then(a.cmp(&b)));
            ranked.truncate(m);
            let edges = ranked.iter().map(|&v| copied_edges(graph, v, budget, Some(split), &mut rng)).collect();
            let labels = ranked.iter().map(|&v| graph.labels()[v]).collect();
            (Some(ranked), labels, edges)
        }
        BaselineKind::TestCopy => {
            need(&unlabeled, "unlabeled")?;
            let src = pick(&mut rng, &unlabeled, m);
            let edges = src.iter().map(|&v| copied_edges(graph, v, budget, None, &mut rng)).collect();
            let labels = (0..m).map(|_| rng.random_range(0..graph.c())).collect();
            (Some(src), labels, edges)
        }
        BaselineKind::TestLink => {
            need(&unlabeled, "unlabeled")?;
            let src = pick(&mut rng, &unlabeled, m);
            let b = budget.min(unlabeled.len());
            let edges = (0..m).map(|_| pick(&mut rng, &unlabeled, b)).collect();
            let labels = (0..m).map(|_| rng.random_range(0..graph.c())).collect();
            (Some(src), labels, edges)
        }
    };

    let x_inj = match &sources {
        Some(src) => graph.features().select_rows(src),
        None => moment_matched_features(graph, m, &mut rng)?,
    };
    let inter_edges: Vec<(usize, usize)> =
        edges.iter().enumerate().flat_map(|(i, js)| js.iter().map(move |&j| (i, j))).collect();
    InjectionPlan::from_edges(n, x_inj, labels, &inter_edges, &[], budget)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star_and_path() -> (Graph, Split) {
        // node 0 is a hub with 7 leaves; 8..12 form a path
        let mut edges: Vec<(usize, usize)> = (1..8).map(|i| (0, i)).collect();
        edges.extend((9..12).map(|i| (i - 1, i)));
        let feats = Matrix::from_fn(12, 4, |i, j| ((i + j) % 3) as f64);
        let labels = (0..12).map(|i| i % 3).collect();
        let g = Graph::new("toy", feats, labels, 3, edges).unwrap();
        let split = Split::from_mask((0..12).map(|i| i % 4 != 3).collect());
        (g, split)
    }

    #[test]
    fn every_kind_is_budget_feasible_and_seeded() {
        let (g, s) = star_and_path();
        for kind in BaselineKind::ALL {
            let p = baseline_inject(&g, &s, kind, 3, 2, 11).unwrap();
            assert_eq!(p.m(), 3);
            assert!(p.within_budget(), "{kind}");
            assert!(p.is_binary());
            assert_eq!(p, baseline_inject(&g, &s, kind, 3, 2, 11).unwrap());
        }
    }

    #[test]
    fn copy_under_budget_keeps_all_edges() {
        let (g, s) = star_and_path();
        let p = baseline_inject(&g, &s, BaselineKind::Copy, 9, 5, 3).unwrap();
        for i in 0..p.m() {
            // find the copied source through its features and label
            let deg = p.inter().row(i).iter().sum::<f64>() as usize;
            assert!(deg <= 5);
        }
        // a copy of a path node (degree <= 2) keeps its full neighborhood
        let sources: Vec<usize> = s.labeled_nodes();
        assert_eq!(sources.len(), 9);
        for (i, &v) in sources.iter().enumerate() {
            let row: Vec<usize> = (0..g.n()).filter(|&j| p.inter().get(i, j) == 1.0).collect();
            if g.degree(v) <= 5 {
                let mut nb: Vec<usize> = g.neighbors(v).collect();
                nb.sort_unstable();
                assert_eq!(row, nb, "copy of node {v}");
            } else {
                assert_eq!(row.len(), 5);
            }
            assert_eq!(p.labels()[i], g.labels()[v]);
        }
    }

    #[test]
    fn testlink_targets_unlabeled_nodes() {
        let (g, s) = star_and_path();
        let p = baseline_inject(&g, &s, BaselineKind::TestLink, 2, 3, 5).unwrap();
        for (_, j) in p.inter_edges() {
            assert!(!s.is_labeled(j));
        }
        assert_eq!(p.row_degrees(), vec![3.0, 3.0]);
    }

    #[test]
    fn newcopy_ranks_by_unlabeled_neighbors() {
        let (g, s) = star_and_path();
        let p = baseline_inject(&g, &s, BaselineKind::NewCopy, 1, 1, 0).unwrap();
        // hub 0 touches unlabeled leaves 3 and 7
        assert_eq!(p.x_inj().row(0), g.features().row(0));
        let (_, j) = p.inter_edges()[0];
        assert!(!s.is_labeled(j));
    }

    #[test]
    fn copy_family_rejects_oversized_m() {
        let (g, s) = star_and_path();
        assert!(baseline_inject(&g, &s, BaselineKind::TestCopy, 4, 2, 0).is_err());
        assert!(baseline_inject(&g, &s, BaselineKind::Copy, 10, 2, 0).is_err());
    }

    #[test]
    fn parse_names() {
        for kind in BaselineKind::ALL {
            assert_eq!(kind.to_string().parse::<BaselineKind>().unwrap(), kind);
        }
        assert!("sba".parse::<BaselineKind>().is_err());
    }
}
