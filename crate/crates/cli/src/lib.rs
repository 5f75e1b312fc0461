//! `hsa` command line. [`run`] parses arguments, writes data files and a
//! final `RESULT ` summary line, and returns the process exit code.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hsa_core::causal::{generate, trace_csv, CausalConfig, GrowthPolicy};
use hsa_core::cost::{bench_csv, flops_estimate, scaling_bench, BenchConfig, BenchMode, FlopsMode};
use hsa_core::energy::EnergyParams;
use hsa_core::fixtures::random_states_dims;
use hsa_core::hierarchy::{build_fixed, build_text, hash_embed, repeat_last};
use hsa_core::numeric::fmt_shortest;
use hsa_core::oracle::{flat_attention, kl_objective, materialize_matrix, minimize_block_kl, pairwise_psi, DirectOracle};
use hsa_core::{hsa_forward, DpOptions, HsaError, LeafStates, PayloadMode, PosMode, SiblingMask, SignalHierarchy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Input(String),
    Verify(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Verify(m) => m,
        }
    }
}

impl From<HsaError> for CliError {
    fn from(e: HsaError) -> Self {
        match e {
            HsaError::Config(_) | HsaError::InvalidBranching(_) => CliError::Usage(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "hsa", version, about = "Hierarchical self-attention over signal hierarchies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run attention on a hierarchy and write the updated leaves.
    Attend(AttendArgs),
    /// Write the dense attention matrix as CSV.
    Matrix(MatrixArgs),
    /// Compare the hierarchical matrix with flat attention.
    Compare(CompareArgs),
    /// Emit op counts (and optionally timings) as CSV.
    Bench(BenchArgs),
    /// Simulate autoregressive decoding with the incremental cache.
    Generate(GenerateArgs),
    /// Build a hierarchy from a raw vector file or from text.
    Build(BuildArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PayloadArg {
    Keys,
    Values,
}

impl From<PayloadArg> for PayloadMode {
    fn from(p: PayloadArg) -> Self {
        match p {
            PayloadArg::Keys => PayloadMode::Keys,
            PayloadArg::Values => PayloadMode::Values,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PosArg {
    Fourier,
    Random,
    Zero,
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq, Eq)]
enum BuildMode {
    Fixed,
    Text,
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// Restrict every node to its left siblings.
    #[arg(long)]
    causal: bool,
    /// Let a leaf attend to itself (causal mode only; default true there).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    include_self: Option<bool>,
    /// Multiplier on position dot products.
    #[arg(long, default_value_t = 1.0)]
    pos_scale: f64,
}

impl MaskArgs {
    fn mask(&self) -> CliResult<SiblingMask> {
        match (self.causal, self.include_self) {
            (true, inc) => Ok(SiblingMask::Left {
                include_self: inc.unwrap_or(true),
            }),
            (false, Some(true)) => Err(CliError::Usage("--include-self requires --causal".into())),
            (false, _) => Ok(SiblingMask::All),
        }
    }
}

#[derive(Args, Debug)]
struct AttendArgs {
    /// Hierarchy JSON.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PayloadArg::Keys)]
    payload: PayloadArg,
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Check every leaf against the per-leaf recursion.
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the flat reference matrix here.
    #[arg(long)]
    flat_out: Option<PathBuf>,
    #[command(flatten)]
    mask: MaskArgs,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    input: PathBuf,
    /// Feature width used by the FLOPs ratio (defaults to the hierarchy dim).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pos_scale: f64,
    /// Also run the numeric block-KL minimizer and require the closed form to
    /// be at least as good.
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Token counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    n: Vec<usize>,
    /// Bottom-to-top branching; the last factor repeats.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    branching: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    pos_dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "flat,hsa,direct")]
    modes: Vec<String>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Record median wall time per row.
    #[arg(long)]
    timing: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// `flat`, `fixed:b1,b2,...` or `text`.
    #[arg(long, default_value = "fixed:2,2")]
    policy: String,
    /// Tokens to generate from seeded states (ignored for `text`).
    #[arg(long, default_value_t = 128)]
    tokens: usize,
    /// Text file driving the `text` policy.
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    pos_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PayloadArg::Keys)]
    payload: PayloadArg,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value = "true")]
    include_self: bool,
    #[arg(long, default_value_t = 1.0)]
    pos_scale: f64,
    /// Recompute every row from scratch and compare.
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long, value_enum)]
    mode: BuildMode,
    /// Raw vectors (one per line) for `fixed`, plain text for `text`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    branching: Vec<usize>,
    /// Leaf width; defaults to the longest vector (fixed) or 16 (text).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pos_dim: usize,
    #[arg(long, value_enum, default_value_t = PosArg::Fourier)]
    pos_mode: PosArg,
    /// Seed of the random Fourier positions.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI on `args` (including the program name).
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Attend(a) => attend(a, out),
        Command::Matrix(a) => matrix(a, out),
        Command::Compare(a) => compare(a, out),
        Command::Bench(a) => bench(a, out),
        Command::Generate(a) => generate_cmd(a, out),
        Command::Build(a) => build(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn load(path: &Path) -> CliResult<SignalHierarchy> {
    SignalHierarchy::from_json(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Writes `data` to `path`, or to `out` when no path is given.
fn emit(path: Option<&Path>, data: &str, out: &mut dyn Write) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, data).map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display()))),
        None => out.write_all(data.as_bytes()).map_err(|e| CliError::Input(e.to_string())),
    }
}

fn result_line(out: &mut dyn Write, fields: &[(&str, String)]) -> CliResult<()> {
    let body: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(out, "RESULT {}", body.join(" ")).map_err(|e| CliError::Input(e.to_string()))
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn attend(a: AttendArgs, out: &mut dyn Write) -> CliResult<()> {
    let h = load(&a.input)?;
    let states = LeafStates::from_hierarchy(&h);
    let mask = a.mask.mask()?;
    let opts = DpOptions {
        payload: a.payload.into(),
        mask,
        pos_scale: a.mask.pos_scale,
        threads: a.threads.max(1),
    };
    let res = hsa_forward(&h, &states, &opts)?;
    let updated = h.with_leaf_features(&res.updated_q)?;
    emit(a.out.as_deref(), &(updated.to_json() + "\n"), out)?;
    let mut fields = vec![
        ("leaves", h.n_leaves().to_string()),
        ("families", h.stats().n_families.to_string()),
        ("ops", res.ops.to_string()),
        ("degenerate", res.degenerate_leaves.len().to_string()),
    ];
    if a.verify {
        let params = EnergyParams {
            pos_scale: a.mask.pos_scale,
        };
        let oracle = DirectOracle::new(&h, &states, params, mask, opts.payload);
        let mut worst: f64 = 0.0;
        for (i, g) in res.grads.iter().enumerate() {
            worst = worst.max(max_abs_diff(g, &oracle.gradient(i)?));
        }
        fields.push(("maxdiff", f6(worst)));
        result_line(out, &fields)?;
        if worst.is_nan() || worst > a.tol {
            return Err(CliError::Verify(format!("max difference {worst:e} exceeds {:e}", a.tol)));
        }
        return Ok(());
    }
    result_line(out, &fields)
}

fn matrix_csv(m: &ndarray::Array2<f64>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|&x| fmt_shortest(x)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn matrix(a: MatrixArgs, out: &mut dyn Write) -> CliResult<()> {
    let h = load(&a.input)?;
    let states = LeafStates::from_hierarchy(&h);
    let params = EnergyParams {
        pos_scale: a.mask.pos_scale,
    };
    let m = materialize_matrix(&h, &states, params, a.mask.mask()?);
    emit(a.out.as_deref(), &matrix_csv(&m.theta_hat), out)?;
    if let Some(p) = &a.flat_out {
        let (_, tf) = flat_attention(&pairwise_psi(&h, &states, params), &states.k)?;
        emit(Some(p), &matrix_csv(&tf), out)?;
    }
    result_line(
        out,
        &[
            ("n", m.n().to_string()),
            ("blocks", m.blocks.len().to_string()),
            ("rowsum_err", f6(m.max_row_sum_error())),
            ("block_spread", f6(m.max_block_spread())),
        ],
    )
}

fn compare(a: CompareArgs, out: &mut dyn Write) -> CliResult<()> {
    let h = load(&a.input)?;
    let states = LeafStates::from_hierarchy(&h);
    let params = EnergyParams { pos_scale: a.pos_scale };
    let (_, tf) = flat_attention(&pairwise_psi(&h, &states, params), &states.k)?;
    let m = materialize_matrix(&h, &states, params, SiblingMask::All);
    let kl = kl_objective(&m.theta_hat, &tf);
    let maxdiff = max_abs_diff(m.theta_hat.iter(), tf.iter());
    let rowsum = m.max_row_sum_error();
    let cost = flops_estimate(&h, a.dim.unwrap_or(h.dim()), FlopsMode::Hsa);
    let rowsum_field = if rowsum < 1e-9 { "rowsum_err<1e-9".to_string() } else { format!("rowsum_err={}", f6(rowsum)) };
    let mut line = format!(
        "RESULT kl={} maxdiff={} {} flops_ratio={}",
        f6(kl.value),
        f6(maxdiff),
        rowsum_field,
        f6(cost.ratio)
    );
    let mut failure = None;
    if a.verify {
        let r = minimize_block_kl(&h, &tf, a.max_iters, 1e-10);
        let kl_min = kl_objective(&r.matrix.theta_hat, &tf).value;
        line.push_str(&format!(" kl_min={} iterations={}", f6(kl_min), r.iterations));
        if kl.value.is_nan() || kl.value > kl_min + a.tol {
            failure = Some(format!("closed form KL {} exceeds minimizer {}", kl.value, kl_min));
        }
    }
    writeln!(out, "{line}").map_err(|e| CliError::Input(e.to_string()))?;
    failure.map_or(Ok(()), |m| Err(CliError::Verify(m)))
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    let modes = a.modes.iter().map(|m| BenchMode::parse(m)).collect::<Result<Vec<_>, _>>()?;
    if let Some(&b) = a.branching.iter().find(|&&b| b < 2) {
        return Err(CliError::Usage(format!("branching factor {b} is below 2")));
    }
    let configs: Vec<BenchConfig> = a
        .n
        .iter()
        .map(|&n| BenchConfig {
            pos_dim: a.pos_dim,
            repeats: a.repeats,
            threads: a.threads.max(1),
            seed: a.seed,
            modes: modes.clone(),
            timing: a.timing,
            ..BenchConfig::new(n, a.branching.clone(), a.dim)
        })
        .collect();
    let rows = scaling_bench(&configs)?;
    emit(a.out.as_deref(), &bench_csv(&rows), out)?;
    let total: u64 = rows.iter().map(|r| r.ops_measured).sum();
    result_line(out, &[("rows", rows.len().to_string()), ("ops_total", total.to_string())])
}

fn generate_cmd(a: GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    let (policy, states) = if a.policy == "text" {
        let path = a.text.as_ref().ok_or_else(|| CliError::Usage("the text policy needs --text".into()))?;
        let (policy, tokens) = GrowthPolicy::from_text(&read(path)?)?;
        let x: Vec<Vec<f64>> = tokens.iter().map(|t| hash_embed(t, a.dim)).collect();
        let q: Vec<Vec<f64>> = x.iter().map(|v| hsa_core::energy::layer_norm(v)).collect();
        (policy, LeafStates { q: q.clone(), k: q, v: x })
    } else {
        if a.tokens == 0 {
            return Err(CliError::Usage("--tokens must be positive".into()));
        }
        (GrowthPolicy::parse(&a.policy)?, random_states_dims(a.tokens, a.dim, a.seed))
    };
    let cfg = CausalConfig {
        include_self: a.include_self,
        payload: a.payload.into(),
        pos_scale: a.pos_scale,
    };
    let g = generate(&states, &policy, a.pos_dim, PosMode::Fourier, cfg, a.verify)?;
    emit(a.out.as_deref(), &trace_csv(&g.rows), out)?;
    let mut fields = vec![
        ("tokens", g.rows.len().to_string()),
        ("peak_nodes", g.peak_nodes.to_string()),
        ("depth", g.final_depth.to_string()),
    ];
    if a.verify {
        let worst = g.rows.iter().filter_map(|r| r.max_abs_diff).fold(0.0, f64::max);
        fields.push(("max_abs_diff", f6(worst)));
        result_line(out, &fields)?;
        if worst.is_nan() || worst > a.tol {
            return Err(CliError::Verify(format!("max difference {worst:e} exceeds {:e}", a.tol)));
        }
        return Ok(());
    }
    result_line(out, &fields)
}

/// One vector per non-empty line, components separated by commas and/or
/// whitespace; `#` starts a comment.
fn parse_vectors(text: &str) -> CliResult<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Input(format!("line {}: {e}", lineno + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Input("no vectors in input".into()));
    }
    Ok(rows)
}

fn build(a: BuildArgs, out: &mut dyn Write) -> CliResult<()> {
    let pos_mode = match a.pos_mode {
        PosArg::Fourier => PosMode::Fourier,
        PosArg::Random => PosMode::RandomFourier { seed: a.seed },
        PosArg::Zero => PosMode::Zero,
    };
    let text = read(&a.input)?;
    let h = match a.mode {
        BuildMode::Fixed => {
            let mut rows = parse_vectors(&text)?;
            let longest = rows.iter().map(Vec::len).max().unwrap_or(0);
            let dim = a.dim.unwrap_or(longest);
            if longest > dim {
                return Err(CliError::Input(format!("vector of length {longest} exceeds --dim {dim}")));
            }
            for r in &mut rows {
                r.resize(dim, 0.0);
            }
            let n = rows.len();
            build_fixed(&rows, &repeat_last(&a.branching, n), pos_mode, a.pos_dim)?
        }
        BuildMode::Text => build_text(&text, a.dim.unwrap_or(16), a.pos_dim, pos_mode)?,
    };
    emit(a.out.as_deref(), &(h.to_json() + "\n"), out)?;
    let st = h.stats();
    result_line(
        out,
        &[
            ("leaves", st.n_leaves.to_string()),
            ("families", st.n_families.to_string()),
            ("max_branching", st.max_branching.to_string()),
            ("depth", st.depth.to_string()),
        ],
    )
}
