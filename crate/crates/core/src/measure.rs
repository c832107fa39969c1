//! The generalized Markov measure `M` on thin cylinders, the path kernels
//! `P_x`, and a statistical check that the conditional law of the future
//! given the past is `P_{F(past)}`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::EmpiricalMeasure;
use crate::coding::{code_indices, past_indices, CodingConfig};
use crate::error::{input_err, Result};
use crate::graph::EdgeId;
use crate::stats::Estimate;
use crate::system::{MarkovSystem, State};

/// Window count, hit counts and summed predictions per word.
type BinTally = (usize, Vec<f64>, Vec<f64>);

/// A thin cylinder `_start[e_1, ..., e_k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cylinder {
    pub start: i64,
    pub word: Vec<EdgeId>,
}

impl Cylinder {
    pub fn new(system: &MarkovSystem, start: i64, word: Vec<EdgeId>) -> Result<Self> {
        if !system.graph().validate_path(&word)? {
            return input_err("cylinder word is not a path");
        }
        Ok(Self { start, word })
    }

    /// `M` of the cylinder. Shift invariance makes this independent of `start`.
    pub fn measure(&self, system: &MarkovSystem, mu: &EmpiricalMeasure) -> Result<Estimate> {
        cylinder_measure(system, mu, &self.word)
    }
}

pub(crate) fn path_probability_indices(system: &MarkovSystem, x: &State, word: &[usize]) -> f64 {
    let mut prob = 1.0;
    let mut y = *x;
    for &k in word {
        let p = system.edge_probability(k, &y);
        if p == 0.0 {
            return 0.0;
        }
        prob *= p;
        y = system.map_index(k, &y);
    }
    prob
}

/// `p_{e_1}(x) p_{e_2}(w_{e_1} x) ...`: the probability that the chain started
/// at `x` emits `word` first. Zero when the word leaves the support.
pub fn path_probability(system: &MarkovSystem, x: &State, word: &[EdgeId]) -> Result<f64> {
    let idx = word
        .iter()
        .map(|&id| system.graph().index_of(id))
        .collect::<Result<Vec<_>>>()?;
    Ok(path_probability_indices(system, x, &idx))
}

/// `integral p_{e_1}(x) p_{e_2}(w_{e_1} x) ... d mu(x)` with a standard error.
pub fn cylinder_measure(
    system: &MarkovSystem,
    mu: &EmpiricalMeasure,
    word: &[EdgeId],
) -> Result<Estimate> {
    if !system.graph().validate_path(word)? {
        return input_err("cylinder word is not a path");
    }
    let idx = word
        .iter()
        .map(|&id| system.graph().index_of(id))
        .collect::<Result<Vec<_>>>()?;
    Ok(mu.integrate(|x| path_probability_indices(system, x, &idx)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTestConfig {
    pub past_length: usize,
    pub n_windows: usize,
    pub stride: usize,
    pub bins_per_coord: usize,
    pub min_per_bin: usize,
    /// Pass threshold on the occupancy-weighted total-variation gap.
    pub tolerance: f64,
    #[serde(default)]
    pub binning: Binning,
}

/// How bin edges are placed along each coordinate of a part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// Equal-width bins over the bounding box of the coded points.
    #[default]
    BoundingBox,
    /// Equal-count bins along each coordinate (marginal quantiles).
    Quantile,
}

impl Default for ConditionalTestConfig {
    fn default() -> Self {
        Self {
            past_length: 400,
            n_windows: 100_000,
            stride: 1,
            bins_per_coord: 32,
            min_per_bin: 200,
            tolerance: 0.02,
            binning: Binning::BoundingBox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub vertex: usize,
    pub cell: Vec<usize>,
    pub count: usize,
    pub frequencies: Vec<f64>,
    pub predicted: Vec<f64>,
    pub total_variation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTestReport {
    pub past_length: usize,
    pub words_tested: Vec<Vec<EdgeId>>,
    pub max_abs_gap: f64,
    /// Largest `|frequency - prediction|` in binomial standard errors.
    pub max_z: f64,
    pub total_variation_gap: f64,
    pub n_windows: usize,
    pub windows_unconverged: usize,
    pub windows_excluded: usize,
    pub bins_used: usize,
    pub bins_excluded: usize,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip)]
    pub bins: Vec<BinRow>,
}

impl ConditionalTestReport {
    /// Per-bin detail rows as CSV.
    pub fn write_bins_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["vertex".to_string(), "cell".into(), "count".into()];
        for (k, _) in self.words_tested.iter().enumerate() {
            header.push(format!("freq_{}", k + 1));
            header.push(format!("pred_{}", k + 1));
        }
        header.push("total_variation".into());
        w.write_record(&header)?;
        for b in &self.bins {
            let mut row = vec![
                b.vertex.to_string(),
                b.cell
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(":"),
                b.count.to_string(),
            ];
            for (f, p) in b.frequencies.iter().zip(&b.predicted) {
                row.push(format!("{f:?}"));
                row.push(format!("{p:?}"));
            }
            row.push(format!("{:?}", b.total_variation));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Compares, bin by bin over coded pasts, the empirical frequency of each
/// future word with its predicted probability under `P_{F(past)}`.
///
/// Window `j` has its past ending at symbol `past_length + j * stride`; the
/// past is coded with `coding` (window capped at `past_length`). Coded points
/// are binned on a `bins_per_coord` grid over the bounding box of each part.
/// The prediction for a bin is the mean of `path_probability` over its
/// members; bins with fewer than `min_per_bin` windows are excluded.
pub fn conditional_test(
    system: &MarkovSystem,
    symbols: &[EdgeId],
    coding: &CodingConfig,
    config: &ConditionalTestConfig,
    words: &[Vec<EdgeId>],
) -> Result<ConditionalTestReport> {
    let ConditionalTestConfig {
        past_length,
        n_windows,
        stride,
        ..
    } = *config;
    if past_length == 0 || n_windows == 0 || stride == 0 || config.bins_per_coord == 0 {
        return input_err("past_length, n_windows, stride and bins_per_coord must be positive");
    }
    if words.is_empty() || words.iter().any(Vec::is_empty) {
        return input_err("need at least one nonempty word");
    }
    let word_idx = words
        .iter()
        .map(|w| {
            if !system.graph().validate_path(w)? {
                return input_err("test word is not a path");
            }
            w.iter()
                .map(|&id| system.graph().index_of(id))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let future = word_idx.iter().map(Vec::len).max().unwrap_or(1);
    let needed = past_length + (n_windows - 1) * stride + future;
    if symbols.len() < needed {
        return input_err(format!(
            "symbol stream has {} symbols, need {needed}",
            symbols.len()
        ));
    }
    let idx = past_indices(system, &symbols[..needed])?;
    let coding = CodingConfig {
        max_window: coding.max_window.min(past_length),
        ..coding.clone()
    };
    coding.check(system)?;

    struct Window {
        point: State,
        hits: Vec<bool>,
        predicted: Vec<f64>,
    }
    let coded: Vec<Option<Window>> = (0..n_windows)
        .into_par_iter()
        .map(|j| {
            let end = past_length + j * stride;
            let r = code_indices(system, &idx[end - past_length..end], &coding);
            if !r.converged {
                return None;
            }
            let next = &idx[end..];
            Some(Window {
                point: r.point,
                hits: word_idx.iter().map(|w| next.starts_with(w)).collect(),
                predicted: word_idx
                    .iter()
                    .map(|w| path_probability_indices(system, &r.point, w))
                    .collect(),
            })
        })
        .collect();
    let windows_unconverged = coded.iter().filter(|w| w.is_none()).count();
    let windows: Vec<Window> = coded.into_iter().flatten().collect();

    // interior bin edges per part and coordinate
    let dim = system.dim();
    let nb = config.bins_per_coord;
    let mut edges = vec![vec![Vec::new(); dim]; system.vertex_count()];
    for (v, per_coord) in edges.iter_mut().enumerate() {
        for (j, e) in per_coord.iter_mut().enumerate() {
            let mut xs: Vec<f64> = windows
                .iter()
                .filter(|w| w.point.vertex == v + 1)
                .map(|w| w.point.coords()[j])
                .collect();
            if xs.is_empty() {
                continue;
            }
            xs.sort_by(f64::total_cmp);
            *e = match config.binning {
                Binning::BoundingBox => {
                    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
                    (1..nb)
                        .map(|k| lo + (hi - lo) * k as f64 / nb as f64)
                        .collect()
                }
                Binning::Quantile => (1..nb).map(|k| xs[k * xs.len() / nb]).collect(),
            };
        }
    }
    let cell_of = |s: &State| -> (usize, Vec<usize>) {
        let cell = s
            .coords()
            .iter()
            .zip(&edges[s.vertex - 1])
            .map(|(&c, e)| e.partition_point(|&b| b <= c))
            .collect();
        (s.vertex, cell)
    };

    let nw = words.len();
    let mut bins: BTreeMap<(usize, Vec<usize>), BinTally> = BTreeMap::new();
    for w in &windows {
        let entry = bins
            .entry(cell_of(&w.point))
            .or_insert_with(|| (0, vec![0.0; nw], vec![0.0; nw]));
        entry.0 += 1;
        for k in 0..nw {
            entry.1[k] += f64::from(u8::from(w.hits[k]));
            entry.2[k] += w.predicted[k];
        }
    }

    let mut rows = Vec::new();
    let mut excluded_bins = 0;
    let mut excluded_windows = 0;
    let (mut max_gap, mut max_z, mut tv_sum, mut used) = (0.0f64, 0.0f64, 0.0, 0usize);
    for ((vertex, cell), (count, hits, pred)) in bins {
        if count < config.min_per_bin {
            excluded_bins += 1;
            excluded_windows += count;
            continue;
        }
        let n = count as f64;
        let frequencies: Vec<f64> = hits.iter().map(|h| h / n).collect();
        let predicted: Vec<f64> = pred.iter().map(|p| p / n).collect();
        let mut tv = 0.0;
        for (f, p) in frequencies.iter().zip(&predicted) {
            let gap = (f - p).abs();
            tv += gap;
            max_gap = max_gap.max(gap);
            let se = (p * (1.0 - p) / n).sqrt();
            if gap > 0.0 {
                max_z = max_z.max(if se > 0.0 { gap / se } else { f64::INFINITY });
            }
        }
        let tv = tv / 2.0;
        tv_sum += tv * n;
        used += count;
        rows.push(BinRow {
            vertex,
            cell,
            count,
            frequencies,
            predicted,
            total_variation: tv,
        });
    }
    if used == 0 {
        return input_err(format!(
            "no bin reached {} windows; lower bins_per_coord or add windows",
            config.min_per_bin
        ));
    }
    let total_variation_gap = tv_sum / used as f64;
    Ok(ConditionalTestReport {
        past_length,
        words_tested: words.to_vec(),
        max_abs_gap: max_gap,
        max_z,
        total_variation_gap,
        n_windows: windows.len(),
        windows_unconverged,
        windows_excluded: excluded_windows,
        bins_used: rows.len(),
        bins_excluded: excluded_bins,
        tolerance: config.tolerance,
        passed: total_variation_gap <= config.tolerance,
        bins: rows,
    })
}

/// All single-edge words, in id order.
pub fn single_edge_words(system: &MarkovSystem) -> Vec<Vec<EdgeId>> {
    system.graph().edges().iter().map(|e| vec![e.id]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{estimate_invariant_measure, simulate, ChainConfig};
    use crate::system::BernoulliParams;

    fn two_state() -> MarkovSystem {
        MarkovSystem::finite_chain(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap()
    }

    #[test]
    fn path_probability_examples() {
        let s = two_state();
        let x = State::discrete(1);
        assert_eq!(path_probability(&s, &x, &[]).unwrap(), 1.0);
        assert_eq!(path_probability(&s, &x, &[EdgeId(2)]).unwrap(), 0.1);
        assert_eq!(path_probability(&s, &x, &[EdgeId(3)]).unwrap(), 0.0);
        let p = path_probability(&s, &x, &[EdgeId(1), EdgeId(2)]).unwrap();
        assert!((p - 0.09).abs() < 1e-16);

        let planar = MarkovSystem::planar_affine_trig();
        let x = State::planar(1, 0.0, 1.0);
        let p1 = planar.edge_probability(0, &x);
        assert_eq!(path_probability(&planar, &x, &[EdgeId(1)]).unwrap(), p1);
    }

    #[test]
    fn cylinder_examples() {
        let s = two_state();
        let cfg = ChainConfig {
            thinning: 5,
            ..ChainConfig::new(State::discrete(1), 21)
        };
        let mu = estimate_invariant_measure(&s, &cfg).unwrap();
        let m = cylinder_measure(&s, &mu, &[EdgeId(1)]).unwrap();
        assert!((m.value - 0.75).abs() <= 3.0 * m.std_error, "{m:?}");
        let total: f64 = single_edge_words(&s)
            .iter()
            .map(|w| cylinder_measure(&s, &mu, w).unwrap().value)
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(cylinder_measure(&s, &mu, &[EdgeId(1), EdgeId(3)]).is_err());

        let b = MarkovSystem::bernoulli_ifs(BernoulliParams::default()).unwrap();
        let mu = estimate_invariant_measure(&b, &ChainConfig::new(State::line(1, 0.5), 2)).unwrap();
        let word = [EdgeId(1), EdgeId(2), EdgeId(2), EdgeId(1), EdgeId(1)];
        assert_eq!(cylinder_measure(&b, &mu, &word).unwrap().value, 1.0 / 32.0);

        let cyl = Cylinder::new(&s, -3, vec![EdgeId(2), EdgeId(3)]).unwrap();
        let shifted = Cylinder {
            start: 7,
            ..cyl.clone()
        };
        let mu = estimate_invariant_measure(&s, &ChainConfig::new(State::discrete(1), 2)).unwrap();
        assert_eq!(
            cyl.measure(&s, &mu).unwrap(),
            shifted.measure(&s, &mu).unwrap()
        );
        assert!(Cylinder::new(&s, 0, vec![EdgeId(2), EdgeId(2)]).is_err());
    }

    #[test]
    fn additivity_over_extensions() {
        let p = MarkovSystem::planar_affine_trig();
        let cfg = ChainConfig {
            n_samples: 5000,
            ..ChainConfig::new(State::planar(1, 0.0, 1.0), 4)
        };
        let mu = estimate_invariant_measure(&p, &cfg).unwrap();
        let g = p.graph();
        for word in [vec![EdgeId(1)], vec![EdgeId(2), EdgeId(1), EdgeId(3)]] {
            let last = g.edge(g.index_of(*word.last().unwrap()).unwrap()).terminal;
            let whole = cylinder_measure(&p, &mu, &word).unwrap().value;
            let parts: f64 = g
                .out_edges(last)
                .iter()
                .map(|&k| {
                    let mut w = word.clone();
                    w.push(g.edge(k).id);
                    cylinder_measure(&p, &mu, &w).unwrap().value
                })
                .sum();
            assert!((whole - parts).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_test_finite_chain() {
        let s = two_state();
        let t = simulate(&s, State::discrete(1), 200_010, 7).unwrap();
        let cfg = ConditionalTestConfig {
            past_length: 1,
            n_windows: 200_000,
            ..Default::default()
        };
        let r = conditional_test(
            &s,
            &t.symbols(),
            &CodingConfig::default_for(&s),
            &cfg,
            &single_edge_words(&s),
        )
        .unwrap();
        assert_eq!(r.bins_used, 2);
        assert!(r.max_z <= 3.0, "{r:?}");
        assert!(r.passed);
        // row 1 of the matrix
        let row1 = r.bins.iter().find(|b| b.vertex == 1).unwrap();
        assert!((row1.predicted[0] - 0.9).abs() < 1e-9, "{row1:?}");
    }

    #[test]
    fn conditional_test_bernoulli_is_independent() {
        let b = MarkovSystem::bernoulli_ifs(BernoulliParams::default()).unwrap();
        let t = simulate(&b, State::line(1, 0.5), 60_100, 3).unwrap();
        let cfg = ConditionalTestConfig {
            past_length: 60,
            n_windows: 60_000,
            bins_per_coord: 8,
            ..Default::default()
        };
        let r = conditional_test(
            &b,
            &t.symbols(),
            &CodingConfig::default_for(&b),
            &cfg,
            &single_edge_words(&b),
        )
        .unwrap();
        assert_eq!(r.windows_unconverged, 0);
        assert!(r.max_z <= 3.5, "{r:?}");
        assert!(r.passed);
    }

    #[test]
    fn conditional_test_input_errors() {
        let s = two_state();
        let t = simulate(&s, State::discrete(1), 100, 7).unwrap();
        let coding = CodingConfig::default_for(&s);
        let words = single_edge_words(&s);
        let cfg = ConditionalTestConfig {
            past_length: 1,
            n_windows: 1000,
            ..Default::default()
        };
        assert!(conditional_test(&s, &t.symbols(), &coding, &cfg, &words).is_err());
        let cfg = ConditionalTestConfig {
            past_length: 1,
            n_windows: 50,
            ..Default::default()
        };
        // every bin is below the 200-window floor
        assert!(conditional_test(&s, &t.symbols(), &coding, &cfg, &words).is_err());
        assert!(conditional_test(&s, &t.symbols(), &coding, &cfg, &[]).is_err());
    }
}
