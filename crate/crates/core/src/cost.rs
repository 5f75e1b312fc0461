//! FLOPs model and instrumented scaling benchmarks.
//!
//! FLOPs count only the score and aggregation products, with a multiply-add
//! counted as two operations. A flat layer costs `2·(2·N²·d)`. A hierarchy
//! costs `2·(2·|F|²·d)` per family `F` plus `2·|children|·d` for the centroid
//! of every non-root internal node; a single family therefore costs exactly
//! as much as flat attention.

use std::time::Instant;

use crate::dp::{hsa_forward, DpOptions, PayloadMode, SiblingMask};
use crate::energy::{EnergyParams, LeafStates};
use crate::error::{HsaError, Result};
use crate::fixtures::{random_leaves, random_states};
use crate::hierarchy::{build_fixed, repeat_last, PosMode, SignalHierarchy};
use crate::numeric::fmt_shortest;
use crate::oracle::{flat_attention, pairwise_psi, DirectOracle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopsMode {
    Flat,
    Hsa,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub mode: FlopsMode,
    pub flat_flops: u64,
    pub hsa_flops: u64,
    pub n: usize,
    /// Number of families.
    pub m: usize,
    /// Largest branching factor.
    pub b: usize,
    pub d: usize,
    pub depth: usize,
    /// `flat_flops / hsa_flops`.
    pub ratio: f64,
}

impl CostReport {
    /// FLOPs of the selected mode.
    pub fn flops(&self) -> u64 {
        match self.mode {
            FlopsMode::Flat => self.flat_flops,
            FlopsMode::Hsa => self.hsa_flops,
        }
    }
}

pub fn flat_flops(n: usize, d: usize) -> u64 {
    4 * (n as u64).pow(2) * d as u64
}

pub fn flops_estimate(h: &SignalHierarchy, d: usize, mode: FlopsMode) -> CostReport {
    let d64 = d as u64;
    let mut hsa = 0u64;
    for id in 0..h.n_nodes() {
        if h.is_leaf(id) {
            continue;
        }
        let k = h.children(id).len() as u64;
        hsa += 4 * k * k * d64;
        if id != h.root() {
            hsa += 2 * k * d64;
        }
    }
    let st = h.stats();
    let flat = flat_flops(st.n_leaves, d);
    CostReport {
        mode,
        flat_flops: flat,
        hsa_flops: hsa,
        n: st.n_leaves,
        m: st.n_families,
        b: st.max_branching,
        d,
        depth: st.depth,
        ratio: flat as f64 / hsa as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    /// Dense `N × N` softmax.
    Flat,
    /// The tree dynamic program.
    Hsa,
    /// Per-leaf recursion over ancestors.
    Direct,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Flat, BenchMode::Hsa, BenchMode::Direct];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Flat => "flat",
            BenchMode::Hsa => "hsa",
            BenchMode::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| HsaError::Config(format!("unknown bench mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n: usize,
    /// Bottom-to-top branching factors; the last one repeats.
    pub branching: Vec<usize>,
    pub d: usize,
    pub pos_dim: usize,
    pub repeats: usize,
    pub threads: usize,
    pub seed: u64,
    pub modes: Vec<BenchMode>,
    /// Measure wall time; without it the time column stays empty.
    pub timing: bool,
}

impl BenchConfig {
    pub fn new(n: usize, branching: Vec<usize>, d: usize) -> Self {
        BenchConfig {
            n,
            branching,
            d,
            pos_dim: 4,
            repeats: 5,
            threads: 1,
            seed: 0,
            modes: BenchMode::ALL.to_vec(),
            timing: false,
        }
    }

    pub fn hierarchy(&self) -> Result<SignalHierarchy> {
        let leaves = random_leaves(self.n, self.d, self.seed);
        build_fixed(&leaves, &repeat_last(&self.branching, self.n), PosMode::Fourier, self.pos_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub n: usize,
    pub m: usize,
    pub b: usize,
    pub d: usize,
    pub depth: usize,
    pub flops_model: u64,
    pub ops_measured: u64,
    pub wall_ms_median: Option<f64>,
    pub threads: usize,
}

fn run_once(mode: BenchMode, h: &SignalHierarchy, s: &LeafStates, threads: usize) -> Result<u64> {
    match mode {
        BenchMode::Flat => {
            let psi = pairwise_psi(h, s, EnergyParams::default());
            flat_attention(&psi, &s.k)?;
            let n = h.n_leaves() as u64;
            Ok(n * (n - 1))
        }
        BenchMode::Hsa => {
            let opts = DpOptions {
                threads,
                ..DpOptions::default()
            };
            Ok(hsa_forward(h, s, &opts)?.ops)
        }
        BenchMode::Direct => {
            let oracle = DirectOracle::new(h, s, EnergyParams::default(), SiblingMask::All, PayloadMode::Keys);
            for i in 0..h.n_leaves() {
                oracle.gradient(i)?;
            }
            Ok(oracle.ops())
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

pub fn scaling_bench(configs: &[BenchConfig]) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for cfg in configs {
        if cfg.n < 2 {
            return Err(HsaError::Config("bench needs at least two tokens".into()));
        }
        let h = cfg.hierarchy()?;
        let s = random_states(&h, cfg.seed);
        let report = flops_estimate(&h, cfg.d, FlopsMode::Hsa);
        for &mode in &cfg.modes {
            let ops = run_once(mode, &h, &s, cfg.threads)?;
            let wall = if cfg.timing {
                let times = (0..cfg.repeats.max(1))
                    .map(|_| {
                        let t = Instant::now();
                        run_once(mode, &h, &s, cfg.threads).map(|_| t.elapsed().as_secs_f64() * 1e3)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(median(times))
            } else {
                None
            };
            rows.push(BenchRow {
                mode,
                n: report.n,
                m: report.m,
                b: report.b,
                d: cfg.d,
                depth: report.depth,
                flops_model: match mode {
                    BenchMode::Flat => report.flat_flops,
                    BenchMode::Hsa | BenchMode::Direct => report.hsa_flops,
                },
                ops_measured: ops,
                wall_ms_median: wall,
                threads: cfg.threads,
            });
        }
    }
    Ok(rows)
}

pub const BENCH_HEADER: &str = "mode,N,M,b,d,depth,flops_model,ops_measured,wall_ms_median,threads";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.mode.as_str(),
            r.n,
            r.m,
            r.b,
            r.d,
            r.depth,
            r.flops_model,
            r.ops_measured,
            r.wall_ms_median.map(fmt_shortest).unwrap_or_default(),
            r.threads
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::random_flat;
    use crate::hierarchy::DomainKind;

    #[test]
    fn flat_formula() {
        assert_eq!(flat_flops(264, 1024), 285_474_816);
        let h = random_flat(0, 12, 4, 2, DomainKind::Set);
        let r = flops_estimate(&h, 64, FlopsMode::Flat);
        assert_eq!(r.hsa_flops, r.flat_flops);
        assert_eq!(r.flops(), r.flat_flops);
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_has_empty_time_without_timing() {
        let rows = scaling_bench(&[BenchConfig::new(8, vec![2], 4)]).unwrap();
        let csv = bench_csv(&rows);
        assert!(csv.starts_with(BENCH_HEADER));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("flat,8,7,2,4,3,1024,56,,1"));
    }
}
