//! `varsma` command-line front end.
//!
//! Exit codes: 0 on success, 1 on any error, 2 when a fit did not reach the
//! gradient tolerance (the result is still written) or the verification
//! battery found a deviation above tolerance.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::gls::{ModelSpec, SeriesMatrix};
use crate::optimizer::{
    default_grid_bounds, fit, grid_nllk, FitOptions, FitResult, LikelihoodGrid,
};
use crate::simulate::{gen_varsma, matrix_to_rows, sample_params, GeneratorParams, ParamsDocument};
use crate::verify::{run_battery, FaultInjection, GRADIENT_TOLERANCE, IDENTITY_TOLERANCE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "varsma",
    version,
    about = "VAR models with a scalar moving-average polynomial"
)]
pub struct Cli {
    /// Worker threads for multi-start and grid evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a sample path and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit a model to a CSV file.
    Fit(FitArgs),
    /// Tabulate the concentrated NLLK over a grid of MA coefficients (q = 1 or 2).
    Grid(GridArgs),
    /// Run the built-in identity and gradient checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct TrendFlags {
    /// Include an intercept (default).
    #[arg(long, overrides_with = "no_trend")]
    trend: bool,
    /// Fit without an intercept.
    #[arg(long = "no-trend")]
    no_trend: bool,
}

impl TrendFlags {
    fn enabled(&self) -> bool {
        !self.no_trend
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Parameter document (JSON). Parameters are sampled when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Number of series when sampling parameters.
    #[arg(short = 'k', default_value_t = 2)]
    k: usize,
    #[arg(short = 'p', default_value_t = 1)]
    p: usize,
    #[arg(short = 'q', default_value_t = 1)]
    q: usize,
    #[command(flatten)]
    trend: TrendFlags,
    /// Rows to write.
    #[arg(short = 'n', long = "rows", default_value_t = 1000)]
    rows: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "burn-in")]
    burn_in: Option<usize>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Result document path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(short = 'p', default_value_t = 1)]
    p: usize,
    #[arg(short = 'q', default_value_t = 1)]
    q: usize,
    #[command(flatten)]
    trend: TrendFlags,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gradient-norm tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long = "max-iters", default_value_t = 200)]
    max_iters: usize,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    input: PathBuf,
    /// Table path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(short = 'p', default_value_t = 1)]
    p: usize,
    #[arg(short = 'q', default_value_t = 1)]
    q: usize,
    #[command(flatten)]
    trend: TrendFlags,
    /// Per-axis bounds `lo:hi`, comma separated for q = 2.
    #[arg(long, allow_hyphen_values = true)]
    bounds: Option<String>,
    /// Points per axis.
    #[arg(long, default_value_t = 25)]
    resolution: usize,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long = "inject-sign-error", hide = true)]
    inject_sign_error: bool,
}

/// Parses arguments and runs, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if cli.jobs > 0 {
        // the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

/// 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// `serde_json` pretty printer that writes every float with [`format_float`].
struct FixedDigits<'a>(serde_json::ser::PrettyFormatter<'a>);

impl serde_json::ser::Formatter for FixedDigits<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        if value.is_finite() {
            writer.write_all(format_float(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty JSON with 17 significant digits per float and a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(
        &mut out,
        FixedDigits(serde_json::ser::PrettyFormatter::new()),
    );
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out)?)
}

fn write_output(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Reads a numeric CSV: rows are time points, columns are series. The
/// delimiter is a tab when the first line has one, otherwise a comma. A
/// first row that does not parse as numbers is taken as a header.
pub fn read_series_csv(path: &Path) -> anyhow::Result<SeriesMatrix> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_series_csv(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_series_csv(text: &str) -> anyhow::Result<SeriesMatrix> {
    let first_line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let delimiter = if first_line.contains('\t') {
        b'\t'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| anyhow!("malformed CSV: {e}"))?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line());
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(values) => {
                if let Some(first) = rows.first() {
                    if values.len() != first.len() {
                        bail!(
                            "line {line}: expected {} columns, found {}",
                            first.len(),
                            values.len()
                        );
                    }
                }
                if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
                    bail!("line {line}: column {} is not a finite number", bad + 1);
                }
                rows.push(values);
            }
            Err(_) if idx == 0 => continue,
            Err(_) => {
                let col = record
                    .iter()
                    .position(|c| c.parse::<f64>().is_err())
                    .map_or(0, |c| c + 1);
                bail!("line {line}: column {col} is not numeric");
            }
        }
    }
    if rows.is_empty() {
        bail!("no numeric rows");
    }
    Ok(SeriesMatrix::from_rows(&rows)?)
}

pub fn series_to_csv(data: &SeriesMatrix) -> String {
    let v = data.values();
    let mut out = (1..=v.ncols())
        .map(|i| format!("x{i}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for row in v.row_iter() {
        let cells: Vec<String> = row.iter().map(|&x| format_float(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn cmd_simulate(args: &SimulateArgs) -> anyhow::Result<i32> {
    let (params, sampled) = match &args.params {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))?;
            let doc: ParamsDocument = serde_json::from_str(&text)
                .with_context(|| format!("invalid parameter document {}", path.display()))?;
            let mut params = GeneratorParams::try_from(&doc)?;
            if let Some(seed) = args.seed {
                params.seed = seed;
            }
            if let Some(burn_in) = args.burn_in {
                params.burn_in = burn_in;
            }
            (params, false)
        }
        None => {
            let spec = ModelSpec::new(args.k, args.p, args.q, args.trend.enabled())?;
            let mut params = sample_params(spec, args.seed.unwrap_or(0))?;
            if let Some(burn_in) = args.burn_in {
                params.burn_in = burn_in;
            }
            (params, true)
        }
    };
    let data = gen_varsma(&params, args.rows)?;
    write_output(Some(&args.output), &series_to_csv(&data))?;
    if sampled {
        let sidecar = sidecar_path(&args.output);
        let doc = ParamsDocument::from(&params);
        write_output(Some(&sidecar), &to_json(&doc)?)?;
        eprintln!("sampled parameters written to {}", sidecar.display());
    }
    Ok(EXIT_OK)
}

/// `<output>.params.json`.
pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".params.json");
    PathBuf::from(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartDocument {
    pub initial_theta: Vec<f64>,
    pub final_theta: Vec<f64>,
    pub nllk: Option<f64>,
    pub grad_norm: Option<f64>,
    pub iterations: usize,
    pub status: String,
}

/// Result document written by `varsma fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub model: String,
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub trend: bool,
    pub observations: usize,
    pub effective_sample: usize,
    pub theta: Vec<f64>,
    pub mu: Option<Vec<f64>>,
    pub phi_convention: String,
    /// `phis[i]` is `Φ_{i+1}` as a list of rows.
    pub phis: Vec<Vec<Vec<f64>>>,
    pub omega: Vec<Vec<f64>>,
    pub nllk: f64,
    pub log_det_sigma: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub starts: usize,
    pub parameters: usize,
    pub aic: f64,
    pub bic: f64,
    pub omega_floored: bool,
    pub per_start: Vec<StartDocument>,
}

pub const PHI_CONVENTION: &str = "X_t = mu + sum_i X_{t-i} Phi_i + eps_t + sum_j theta_j eps_{t-j}, X_t a row vector; each Phi_i is listed row by row";

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn fit_document(spec: &ModelSpec, observations: usize, result: &FitResult) -> FitDocument {
    let fit = &result.fit;
    let horizon = fit.horizon as f64;
    let params = spec.parameter_count();
    FitDocument {
        model: if spec.q == 0 {
            "VAR (OLS)".into()
        } else {
            "VARsMA".into()
        },
        k: spec.k,
        p: spec.p,
        q: spec.q,
        trend: spec.trend,
        observations,
        effective_sample: fit.horizon,
        theta: result.theta.coeffs().to_vec(),
        mu: fit.mu.clone(),
        phi_convention: PHI_CONVENTION.into(),
        phis: fit.phis.iter().map(matrix_to_rows).collect(),
        omega: matrix_to_rows(&fit.omega),
        nllk: fit.nllk,
        log_det_sigma: fit.log_det_sigma,
        grad_norm: result.grad_norm,
        converged: result.converged,
        starts: result.starts_used,
        parameters: params,
        aic: 2.0 * fit.nllk + 2.0 * params as f64,
        bic: 2.0 * fit.nllk + horizon.ln() * params as f64,
        omega_floored: fit.omega_floored,
        per_start: result
            .per_start
            .iter()
            .map(|s| StartDocument {
                initial_theta: s.initial.coeffs().to_vec(),
                final_theta: s.final_theta.coeffs().to_vec(),
                nllk: finite(s.final_nllk),
                grad_norm: finite(s.grad_norm),
                iterations: s.iterations,
                status: s.status.to_string(),
            })
            .collect(),
    }
}

fn cmd_fit(args: &FitArgs) -> anyhow::Result<i32> {
    let data = read_series_csv(&args.input)?;
    let spec = ModelSpec::new(data.k(), args.p, args.q, args.trend.enabled())?;
    let options = FitOptions {
        n_starts: args.starts,
        max_iters: args.max_iters,
        grad_tol: args.tol,
        seed: args.seed,
        ..FitOptions::default()
    };
    let result = fit(&spec, &data, &options)?;
    let doc = fit_document(&spec, data.rows(), &result);
    write_output(args.output.as_deref(), &to_json(&doc)?)?;
    if result.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "warning: gradient norm {:.3e} above tolerance {:.3e}",
            result.grad_norm, args.tol
        );
        Ok(EXIT_NOT_CONVERGED)
    }
}

/// Parses `lo:hi[,lo:hi]`.
pub fn parse_bounds(text: &str) -> anyhow::Result<Vec<(f64, f64)>> {
    text.split(',')
        .map(|pair| {
            let (lo, hi) = pair
                .split_once(':')
                .ok_or_else(|| anyhow!("bounds must look like lo:hi, got {pair:?}"))?;
            let lo: f64 = lo
                .trim()
                .parse()
                .with_context(|| format!("bad lower bound {lo:?}"))?;
            let hi: f64 = hi
                .trim()
                .parse()
                .with_context(|| format!("bad upper bound {hi:?}"))?;
            Ok((lo, hi))
        })
        .collect()
}

pub fn grid_to_table(grid: &LikelihoodGrid) -> String {
    let q = grid.axes.len();
    let mut header: Vec<String> = (1..=q).map(|i| format!("theta{i}")).collect();
    header.push("stable".into());
    header.push("nllk".into());
    let mut out = header.join(",");
    out.push('\n');
    for idx in 0..grid.len() {
        let mut cells: Vec<String> = grid.point(idx).into_iter().map(format_float).collect();
        cells.push(if grid.mask[idx] {
            "1".into()
        } else {
            "0".into()
        });
        cells.push(if grid.mask[idx] {
            format_float(grid.nllk[idx])
        } else {
            String::new()
        });
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn cmd_grid(args: &GridArgs) -> anyhow::Result<i32> {
    if !(args.q == 1 || args.q == 2) {
        bail!(
            "likelihood grids are supported for q = 1 or 2, not {}",
            args.q
        );
    }
    let data = read_series_csv(&args.input)?;
    let spec = ModelSpec::new(data.k(), args.p, args.q, args.trend.enabled())?;
    let bounds = match &args.bounds {
        Some(text) => parse_bounds(text)?,
        None => default_grid_bounds(args.q),
    };
    let grid = grid_nllk(&spec, &data, &bounds, args.resolution)?;
    write_output(args.output.as_deref(), &grid_to_table(&grid))?;
    Ok(EXIT_OK)
}

fn cmd_verify(args: &VerifyArgs) -> anyhow::Result<i32> {
    let fault = FaultInjection {
        gradient_sign: args.inject_sign_error,
    };
    let report = run_battery(args.seed, fault)?;
    for case in &report.identities {
        println!(
            "identity q={} T={:<3} theta={:?} max_dev={}",
            case.theta.q(),
            case.horizon,
            case.theta.coeffs(),
            format_float(case.max_deviation)
        );
    }
    for case in &report.gradients {
        println!(
            "gradient k={} p={} q={} theta={:?} rel_err={}",
            case.spec.k,
            case.spec.p,
            case.spec.q,
            case.theta.coeffs(),
            format_float(case.relative_error)
        );
    }
    let id_ok = report.worst_identity() < IDENTITY_TOLERANCE;
    let grad_ok = report.worst_gradient() < GRADIENT_TOLERANCE;
    println!(
        "{} identities: worst {} (tolerance {})",
        if id_ok { "PASS" } else { "FAIL" },
        format_float(report.worst_identity()),
        format_float(IDENTITY_TOLERANCE)
    );
    println!(
        "{} gradients: worst {} (tolerance {})",
        if grad_ok { "PASS" } else { "FAIL" },
        format_float(report.worst_gradient()),
        format_float(GRADIENT_TOLERANCE)
    );
    Ok(if report.passed() {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

/// Rebuilds the `k×k` matrices of a parsed result document.
pub fn document_phis(doc: &FitDocument) -> Vec<DMatrix<f64>> {
    doc.phis
        .iter()
        .map(|m| DMatrix::from_fn(m.len(), m.len(), |r, c| m[r][c]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_delimiters() {
        let d = parse_series_csv("a,b\n1,2\n3,4\n").unwrap();
        assert_eq!(d.rows(), 2);
        assert_eq!(d.values()[(1, 1)], 4.0);
        let d = parse_series_csv("1\t2\n3\t4\n5\t6\n").unwrap();
        assert_eq!(d.rows(), 3);
        assert_eq!(d.k(), 2);
        let d = parse_series_csv("0.5\n-1e-3\n").unwrap();
        assert_eq!(d.values().as_slice(), &[0.5, -1e-3]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let err = parse_series_csv("1,2\n3,x\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse_series_csv("x1,x2\n1,2\n3\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(parse_series_csv("a,b\n").is_err());
        assert!(parse_series_csv("1,nan\n").is_err());
    }

    #[test]
    fn float_format_has_17_digits() {
        let s = format_float(0.1);
        assert_eq!(s, "1.0000000000000001e-1");
        assert_eq!(s.parse::<f64>().unwrap(), 0.1);
        assert_eq!(format_float(-2.5), "-2.5000000000000000e0");
    }

    #[test]
    fn bounds_parsing() {
        assert_eq!(parse_bounds("-0.5:0.5").unwrap(), vec![(-0.5, 0.5)]);
        assert_eq!(
            parse_bounds("-2:2,-1:1").unwrap(),
            vec![(-2.0, 2.0), (-1.0, 1.0)]
        );
        assert!(parse_bounds("1-2").is_err());
    }

    #[test]
    fn json_floats_use_17_digits() {
        let text = to_json(&vec![0.1, -2.5, 3.0]).unwrap();
        assert!(text.contains("1.0000000000000001e-1"), "{text}");
        assert!(text.contains("-2.5000000000000000e0"), "{text}");
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, vec![0.1, -2.5, 3.0]);
        assert_eq!(to_json(&Some(f64::NAN)).unwrap().trim(), "null");
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(
            sidecar_path(Path::new("/tmp/x.csv")),
            PathBuf::from("/tmp/x.csv.params.json")
        );
    }
}
