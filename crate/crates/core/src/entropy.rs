//! Kolmogorov-Sinai entropy of the shift.
//!
//! The entropy of the generalized Markov shift equals the `mu`-average of the
//! local branching entropy `g(x) = -sum_e p_e(x) log p_e(x)` (with
//! `0 log 0 = 0`). [`entropy_formula`] evaluates that average on a particle
//! estimate of `mu`. [`entropy_rate_empirical`] is an independent estimate
//! from the symbol stream alone, via block entropies `H_n - H_{n-1}`.

use std::collections::HashMap;
use std::f64::consts::LN_2;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::chain::EmpiricalMeasure;
use crate::error::{input_err, Result};
use crate::graph::EdgeId;
use crate::system::{MarkovSystem, State};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Formula,
    BlockRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    #[default]
    Nats,
    Bits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: u64,
    pub method: Method,
    pub units: Units,
    /// Miller-Madow bias-corrected value (block-rate estimates only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub corrected: Option<f64>,
}

impl Units {
    /// Converts a value in nats to these units; bits are nats divided by `ln 2`.
    pub fn from_nats(self, nats: f64) -> f64 {
        match self {
            Units::Nats => nats,
            Units::Bits => nats / LN_2,
        }
    }

    fn to_nats(self, v: f64) -> f64 {
        match self {
            Units::Nats => v,
            Units::Bits => v * LN_2,
        }
    }
}

impl EntropyEstimate {
    pub fn in_units(self, units: Units) -> Self {
        let convert = |v: f64| {
            if self.units == units {
                v
            } else {
                units.from_nats(self.units.to_nats(v))
            }
        };
        Self {
            value: convert(self.value),
            std_error: convert(self.std_error),
            corrected: self.corrected.map(convert),
            units,
            ..self
        }
    }
}

/// `-sum_e p_e(x) ln p_e(x)`, with zero-probability terms contributing 0.
pub fn local_entropy(system: &MarkovSystem, x: &State) -> f64 {
    -system
        .graph()
        .out_edges(x.vertex)
        .iter()
        .map(|&k| {
            let p = system.edge_probability(k, x);
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// `-sum_e integral p_e log p_e d mu`, in nats.
pub fn entropy_formula(system: &MarkovSystem, mu: &EmpiricalMeasure) -> EntropyEstimate {
    let est = mu.integrate(|x| local_entropy(system, x));
    EntropyEstimate {
        value: est.value.max(0.0),
        std_error: est.std_error,
        n_samples: mu.len() as u64,
        method: Method::Formula,
        units: Units::Nats,
        corrected: None,
    }
}

/// Largest block length accepted by [`block_entropy`].
pub const MAX_BLOCK: usize = 8;
/// Minimum stream length per possible `n`-block.
pub const MIN_SYMBOLS_PER_CELL: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntropy {
    /// `H_1..H_n` in nats (plug-in).
    pub h: Vec<f64>,
    /// Miller-Madow corrected `H_k + (K_k - 1) / (2N)`.
    pub h_corrected: Vec<f64>,
    /// Occupied cells `K_k`.
    pub occupied: Vec<usize>,
    /// Number of overlapping `n`-blocks `N`.
    pub blocks: u64,
    pub alphabet: usize,
    #[serde(skip)]
    counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Default)]
enum Counts {
    #[default]
    Empty,
    Dense(Vec<u64>),
    Sparse(HashMap<u64, u64>),
}

impl BlockEntropy {
    /// CSV with columns `k, H_k, H_k_corrected`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "H_k", "H_k_corrected"])?;
        for (k, (h, c)) in self.h.iter().zip(&self.h_corrected).enumerate() {
            w.write_record(&[(k + 1).to_string(), format!("{h:?}"), format!("{c:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn plugin_entropy<I: Iterator<Item = u64>>(counts: I, total: f64) -> (f64, usize) {
    let mut h = 0.0;
    let mut occupied = 0;
    for c in counts.filter(|&c| c > 0) {
        let p = c as f64 / total;
        h -= p * p.ln();
        occupied += 1;
    }
    (h, occupied)
}

/// Entropies of the empirical distributions of overlapping `k`-blocks for
/// `k = 1..=n`. Shorter blocks are marginals (prefixes) of the `n`-block
/// table, so `H_{k-1} <= H_k <= H_{k-1} + ln |alphabet|` holds exactly.
pub fn block_entropy(symbols: &[EdgeId], n: usize) -> Result<BlockEntropy> {
    if n == 0 || n > MAX_BLOCK {
        return input_err(format!("block length must lie in 1..={MAX_BLOCK}, got {n}"));
    }
    let mut alphabet: Vec<EdgeId> = symbols.to_vec();
    alphabet.sort_unstable();
    alphabet.dedup();
    let a = alphabet.len().max(1) as u64;
    let cells = a.checked_pow(n as u32).unwrap_or(u64::MAX);
    let required = cells.saturating_mul(MIN_SYMBOLS_PER_CELL as u64);
    if (symbols.len() as u64) < required || symbols.len() < n {
        return input_err(format!(
            "{} symbols is too short for {n}-blocks over {a} symbols; need at least {required}",
            symbols.len()
        ));
    }
    let code: Vec<u64> = symbols
        .iter()
        .map(|s| alphabet.binary_search(s).unwrap() as u64)
        .collect();
    let blocks = (symbols.len() - n + 1) as u64;
    let total = blocks as f64;

    let dense = cells <= 1 << 24;
    let mut table_dense = if dense {
        vec![0u64; cells as usize]
    } else {
        Vec::new()
    };
    let mut table_sparse: HashMap<u64, u64> = HashMap::new();
    let mut key = 0u64;
    let top = a.pow(n as u32 - 1);
    for (t, &c) in code.iter().enumerate() {
        if t >= n {
            key -= code[t - n] * top;
        }
        key = key * a + c;
        if t + 1 >= n {
            if dense {
                table_dense[key as usize] += 1;
            } else {
                *table_sparse.entry(key).or_default() += 1;
            }
        }
    }

    let mut h = vec![0.0; n];
    let mut occupied = vec![0; n];
    // marginalize the n-block table onto prefixes of length k
    for k in 1..=n {
        let div = a.pow((n - k) as u32);
        let mut marg = vec![0u64; a.pow(k as u32) as usize];
        if dense {
            for (key, &c) in table_dense.iter().enumerate() {
                marg[(key as u64 / div) as usize] += c;
            }
        } else {
            for (&key, &c) in &table_sparse {
                marg[(key / div) as usize] += c;
            }
        }
        let (hk, kk) = plugin_entropy(marg.into_iter(), total);
        h[k - 1] = hk;
        occupied[k - 1] = kk;
    }
    let h_corrected = h
        .iter()
        .zip(&occupied)
        .map(|(hk, &kk)| hk + (kk as f64 - 1.0) / (2.0 * total))
        .collect();
    Ok(BlockEntropy {
        h,
        h_corrected,
        occupied,
        blocks,
        alphabet: a as usize,
        counts: if dense {
            Counts::Dense(table_dense)
        } else {
            Counts::Sparse(table_sparse)
        },
    })
}

/// `H_n - H_{n-1}` from the block table.
///
/// The standard error combines the multinomial delta-method deviation of the
/// conditional entropy, `sqrt((E[ln^2 q] - h^2) / N)` with `q` the empirical
/// conditional probability of the last symbol, and the size of the
/// Miller-Madow bias term, which dominates when the conditional law is nearly
/// uniform.
pub fn entropy_rate_empirical(symbols: &[EdgeId], n_max: usize) -> Result<EntropyEstimate> {
    let be = block_entropy(symbols, n_max)?;
    let n = n_max;
    let (h_prev, k_prev) = if n > 1 {
        (be.h[n - 2], be.occupied[n - 2])
    } else {
        (0.0, 1)
    };
    let value = be.h[n - 1] - h_prev;
    let total = be.blocks as f64;
    let a = be.alphabet as u64;

    // E[ln^2 q(last | prefix)]
    let second_moment = match &be.counts {
        Counts::Dense(t) => {
            conditional_second_moment(t.iter().enumerate().map(|(k, &c)| (k as u64, c)), a, total)
        }
        Counts::Sparse(t) => conditional_second_moment(t.iter().map(|(&k, &c)| (k, c)), a, total),
        Counts::Empty => 0.0,
    };
    let var = (second_moment - value * value).max(0.0) / total;
    let bias = (be.occupied[n - 1] as f64 - k_prev as f64) / (2.0 * total);
    let corrected = be.h_corrected[n - 1] - if n > 1 { be.h_corrected[n - 2] } else { 0.0 };
    Ok(EntropyEstimate {
        value: value.max(0.0),
        std_error: (var + bias * bias).sqrt(),
        n_samples: be.blocks,
        method: Method::BlockRate,
        units: Units::Nats,
        corrected: Some(corrected),
    })
}

fn conditional_second_moment<I: Iterator<Item = (u64, u64)> + Clone>(
    table: I,
    a: u64,
    total: f64,
) -> f64 {
    let mut prefix: HashMap<u64, u64> = HashMap::new();
    for (key, c) in table.clone().filter(|&(_, c)| c > 0) {
        *prefix.entry(key / a).or_default() += c;
    }
    table
        .filter(|&(_, c)| c > 0)
        .map(|(key, c)| {
            let q = c as f64 / prefix[&(key / a)] as f64;
            c as f64 / total * q.ln().powi(2)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{estimate_invariant_measure, ChainConfig};
    use crate::system::BernoulliParams;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn coin(n: usize, seed: u64) -> Vec<EdgeId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| EdgeId(1 + u32::from(rng.random::<bool>())))
            .collect()
    }

    #[test]
    fn formula_bernoulli_is_ln2() {
        let b = MarkovSystem::bernoulli_ifs(BernoulliParams::default()).unwrap();
        let mu = estimate_invariant_measure(&b, &ChainConfig::new(State::line(1, 0.5), 1)).unwrap();
        let h = entropy_formula(&b, &mu);
        assert_eq!(h.value, LN_2);
        assert_eq!(h.std_error, 0.0);
    }

    #[test]
    fn formula_single_loop_is_zero() {
        let s = MarkovSystem::finite_chain(vec![vec![1.0]]).unwrap();
        let mu = estimate_invariant_measure(&s, &ChainConfig::new(State::discrete(1), 1)).unwrap();
        assert_eq!(entropy_formula(&s, &mu).value, 0.0);
    }

    #[test]
    fn zero_probabilities_contribute_nothing() {
        let p = MarkovSystem::planar_affine_trig();
        let x = State::planar(2, 0.0, -1.0);
        let direct: f64 = [2usize, 3]
            .iter()
            .map(|&k| {
                let q = p.edge_probability(k, &x);
                -q * q.ln()
            })
            .sum();
        assert_eq!(local_entropy(&p, &x), direct);
        assert!(local_entropy(&p, &x) <= 2f64.ln());
    }

    #[test]
    fn block_entropy_examples() {
        let constant = vec![EdgeId(3); 1000];
        let be = block_entropy(&constant, 4).unwrap();
        assert_eq!(be.h, vec![0.0; 4]);

        let stream = coin(1_000_000, 4);
        let be = block_entropy(&stream, 6).unwrap();
        for (k, h) in be.h.iter().enumerate() {
            let expected = (k + 1) as f64 * LN_2;
            // plug-in deficit is about (2^k - 1) / 2N
            assert!((h - expected).abs() < 1e-3, "H_{} = {h}", k + 1);
        }
        let rate = entropy_rate_empirical(&stream, 5).unwrap();
        assert!(
            (rate.value - LN_2).abs() <= 3.0 * rate.std_error,
            "{rate:?}"
        );
        assert_eq!(rate.method, Method::BlockRate);
    }

    #[test]
    fn block_entropy_errors() {
        assert!(block_entropy(&coin(1000, 1), 0).is_err());
        assert!(block_entropy(&coin(1_000_000, 1), 9).is_err());
        let err = block_entropy(&coin(1000, 1), 8).unwrap_err();
        assert!(err.to_string().contains("need at least 2560"));
    }

    #[test]
    fn units() {
        let e = EntropyEstimate {
            value: LN_2,
            std_error: 0.1,
            n_samples: 1,
            method: Method::Formula,
            units: Units::Nats,
            corrected: None,
        };
        let b = e.in_units(Units::Bits);
        assert_eq!(b.value, LN_2 / LN_2);
        assert_eq!(b.std_error, 0.1 / LN_2);
        assert_eq!(b.in_units(Units::Bits), b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn block_entropies_are_monotone(seed in 0u64..1000, n in 1usize..5, bias in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stream: Vec<EdgeId> = (0..5000)
                .map(|_| EdgeId(if rng.random::<f64>() < bias { 1 } else { 2 + rng.random_range(0..2) }))
                .collect();
            let be = block_entropy(&stream, n).unwrap();
            let log_a = (be.alphabet as f64).ln();
            let mut prev = 0.0;
            for &h in &be.h {
                prop_assert!(h >= prev - 1e-12);
                prop_assert!(h <= prev + log_a + 1e-12);
                prev = h;
            }
        }
    }
}
