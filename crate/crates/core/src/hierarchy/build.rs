use super::{ChildSpec, DomainKind, NodeSpec, SignalHierarchy};
use crate::error::{HsaError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// How builders assign position embeddings to the children of a family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosMode {
    /// Deterministic sinusoids of the within-family index.
    Fourier,
    /// Random Fourier features with frequencies and phases drawn from `seed`.
    RandomFourier { seed: u64 },
    /// All-zero positions; families are built with the `set` domain.
    Zero,
}

impl PosMode {
    pub fn domain(self) -> DomainKind {
        match self {
            PosMode::Zero => DomainKind::Set,
            _ => DomainKind::Grid1d,
        }
    }
}

/// Position vectors of length `c` for within-family indices.
#[derive(Clone, Debug)]
pub struct PositionGenerator {
    mode: PosMode,
    c: usize,
    freqs: Vec<f64>,
    phases: Vec<f64>,
}

impl PositionGenerator {
    pub fn new(mode: PosMode, c: usize) -> Self {
        let (freqs, phases) = match mode {
            PosMode::Fourier => (
                (0..c.div_ceil(2))
                    .map(|m| 10000f64.powf(-2.0 * m as f64 / c as f64))
                    .collect(),
                Vec::new(),
            ),
            PosMode::RandomFourier { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let freqs = (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let phases = (0..c).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
                (freqs, phases)
            }
            PosMode::Zero => (Vec::new(), Vec::new()),
        };
        PositionGenerator { mode, c, freqs, phases }
    }

    /// Interleaved `[sin(i·ω_0), cos(i·ω_0), sin(i·ω_1), ...]` with
    /// `ω_m = 10000^(-2m/c)` in Fourier mode; `sqrt(2/c)·cos(ω_m·i + b_m)`
    /// in random mode.
    pub fn position(&self, index: usize) -> Vec<f64> {
        let t = index as f64;
        match self.mode {
            PosMode::Fourier => (0..self.c)
                .map(|j| {
                    let a = t * self.freqs[j / 2];
                    if j % 2 == 0 {
                        a.sin()
                    } else {
                        a.cos()
                    }
                })
                .collect(),
            PosMode::RandomFourier { .. } => {
                let s = (2.0 / self.c as f64).sqrt();
                (0..self.c)
                    .map(|m| s * (self.freqs[m] * t + self.phases[m]).cos())
                    .collect()
            }
            PosMode::Zero => vec![0.0; self.c],
        }
    }

    pub fn domain(&self) -> DomainKind {
        self.mode.domain()
    }
}

fn group(children: Vec<NodeSpec>, gen: &PositionGenerator) -> NodeSpec {
    NodeSpec::family(
        gen.domain(),
        children
            .into_iter()
            .enumerate()
            .map(|(i, node)| ChildSpec {
                pos: gen.position(i),
                node,
            })
            .collect(),
    )
}

/// Groups leaves into consecutive windows level by level. `branching` is
/// listed bottom to top; a ragged last window is allowed, and if the list
/// runs out with more than one node left a final family takes them all.
pub fn build_fixed(leaves: &[Vec<f64>], branching: &[usize], pos_mode: PosMode, pos_dim: usize) -> Result<SignalHierarchy> {
    if leaves.is_empty() {
        return Err(HsaError::EmptyInput("no leaves"));
    }
    if let Some(&b) = branching.iter().find(|&&b| b < 2) {
        return Err(HsaError::InvalidBranching(b));
    }
    let dim = leaves.iter().map(Vec::len).max().unwrap_or(0);
    let gen = PositionGenerator::new(pos_mode, pos_dim);
    let mut level: Vec<NodeSpec> = leaves.iter().map(|x| NodeSpec::leaf(x.clone())).collect();
    let mut k = 0;
    while level.len() > 1 {
        let b = branching.get(k).copied().unwrap_or(level.len());
        let mut next = Vec::with_capacity(level.len().div_ceil(b));
        let mut it = level.into_iter().peekable();
        while it.peek().is_some() {
            next.push(group(it.by_ref().take(b).collect(), &gen));
        }
        level = next;
        k += 1;
    }
    let root = level.pop().expect("one node remains");
    SignalHierarchy::from_spec(dim, pos_dim, root)
}

/// Extends `branching` by repeating its last factor until the product of
/// the factors reaches `n`.
pub fn repeat_last(branching: &[usize], n: usize) -> Vec<usize> {
    let mut out = branching.to_vec();
    let Some(&last) = out.last() else {
        return out;
    };
    let mut cap: usize = out.iter().product();
    while cap < n && last >= 2 {
        out.push(last);
        cap = cap.saturating_mul(last);
    }
    out
}

fn ends_sentence(token: &str) -> bool {
    matches!(token.chars().last(), Some('.' | '?' | '!'))
}

/// Paragraphs (split on blank lines) of sentences (ending in `.`, `?` or `!`
/// followed by whitespace) of whitespace-separated tokens. Empty paragraphs
/// are dropped.
pub fn split_text(text: &str) -> Vec<Vec<Vec<&str>>> {
    let mut paragraphs = Vec::new();
    let mut lines: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            flush_paragraph(&mut lines, &mut paragraphs);
        } else {
            lines.push(line);
        }
    }
    flush_paragraph(&mut lines, &mut paragraphs);
    paragraphs
}

fn flush_paragraph<'a>(lines: &mut Vec<&'a str>, out: &mut Vec<Vec<Vec<&'a str>>>) {
    let mut sentences = Vec::new();
    let mut cur = Vec::new();
    for tok in lines.iter().flat_map(|l| l.split_whitespace()) {
        cur.push(tok);
        if ends_sentence(tok) {
            sentences.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        sentences.push(cur);
    }
    if !sentences.is_empty() {
        out.push(sentences);
    }
    lines.clear();
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic token embedding: FNV-1a 64 of the bytes seeds a splitmix64
/// stream of uniforms on `[-1, 1)`, shifted to zero mean.
pub fn hash_embed(token: &str, dim: usize) -> Vec<f64> {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut v: Vec<f64> = (0..dim)
        .map(|_| {
            let u = (splitmix64(&mut h) >> 11) as f64 / (1u64 << 53) as f64;
            2.0 * u - 1.0
        })
        .collect();
    if dim > 0 {
        let mean = v.iter().sum::<f64>() / dim as f64;
        v.iter_mut().for_each(|x| *x -= mean);
    }
    v
}

/// Three-level paragraph/sentence/token hierarchy with hash-embedded
/// leaves. Every level uses `pos_mode`.
pub fn build_text(text: &str, dim: usize, pos_dim: usize, pos_mode: PosMode) -> Result<SignalHierarchy> {
    let paragraphs = split_text(text);
    if paragraphs.is_empty() {
        return Err(HsaError::EmptyInput("text has no tokens"));
    }
    let gen = PositionGenerator::new(pos_mode, pos_dim);
    let root = group(
        paragraphs
            .iter()
            .map(|p| {
                group(
                    p.iter()
                        .map(|s| group(s.iter().map(|t| NodeSpec::leaf(hash_embed(t, dim))).collect(), &gen))
                        .collect(),
                    &gen,
                )
            })
            .collect(),
        &gen,
    );
    SignalHierarchy::from_spec(dim, pos_dim, root)
}
