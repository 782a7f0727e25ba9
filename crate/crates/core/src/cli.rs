//! Command-line front end: `normalize`, `trace`, `fixedpoint` and `verify`.
//!
//! Exit status is 0 on success, 1 when a numerical invariant fails and 2 on
//! I/O, parse or usage errors. Floats are written with 17 significant
//! digits, so identical inputs give byte-identical files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use thiserror::Error;

use crate::continuation::{branch_stats, Branch, BranchPoint, Continuation, ContinuationSettings};
use crate::discretize::SpatialMesh;
use crate::error::Error;
use crate::evolution::{march, AgeGrid, DensityField};
use crate::fixedpoint::{
    check_shell_conditions, fixed_point_radius, multistart, FixedPointOutcome, ShellReport, DEFAULT_DAMPING,
    DEFAULT_STARTS,
};
use crate::model::{parse_model, ModelSpec};
use crate::reproduction::normalize;

const BRANCH_HEADER: [&str; 8] = [
    "index",
    "n",
    "eps",
    "r_Qu",
    "identity_residual",
    "residual_direct",
    "bifurcation_residual",
    "min_u",
];
const BIFURCATION_RESIDUAL_TOL: f64 = 1e-5;
const SHELL_SAMPLES: usize = 8;
const FIXEDPOINT_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Rescale the birth modulus so that r(Q_0) = 1.
    Normalize,
    /// Trace the positive branch from (1, 0).
    Trace,
    /// Solve the parameter-free problem and check the shell conditions.
    Fixedpoint,
    /// Re-check a stored branch against the model.
    Verify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Txt,
}

#[derive(Debug, Clone, Parser)]
#[command(
    name = "agespace",
    version,
    about = "Equilibria of age- and space-structured population models"
)]
pub struct RunConfig {
    #[arg(value_enum)]
    pub command: Command,
    /// Model configuration file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub na: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    pub eps0: f64,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long, default_value_t = 20)]
    pub max_points: usize,
    #[arg(long, default_value_t = 10.0)]
    pub n_cap: f64,
    #[arg(long, default_value_t = 1e3)]
    pub norm_cap: f64,
    /// Corrector tolerance (relative) for trace and verify, iteration
    /// tolerance for fixedpoint.
    #[arg(long, default_value_t = 1e-11)]
    pub tol: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output file (normalize) or directory (trace, fixedpoint, verify).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Inner shell radius probed by fixedpoint.
    #[arg(long, default_value_t = 1e-3)]
    pub tau0: f64,
    /// Outer shell radius probed by fixedpoint.
    #[arg(long, default_value_t = 10.0)]
    pub tau1: f64,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: Error },
    #[error("malformed data in {path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("invalid arguments: {0}")]
    Usage(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Numerics(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Data { .. } | CliError::Usage(_) => 2,
            CliError::Model { source, .. } => match source {
                Error::Syntax { .. } | Error::Io(_) => 2,
                _ => 1,
            },
            CliError::Numerics(Error::Io(_)) => 2,
            CliError::Invariant(_) | CliError::Numerics(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(source) => CliError::Io {
                    path: path.to_path_buf(),
                    source,
                },
                other => CliError::Data {
                    path: path.to_path_buf(),
                    message: format!("{other:?}"),
                },
            }
        } else {
            CliError::Data {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        let checks = [
            ("tol must be positive", self.tol > 0.0),
            ("eps0 must be nonnegative", self.eps0 >= 0.0),
            ("step must be positive", self.step > 0.0),
            ("n-cap must exceed 1", self.n_cap > 1.0),
            ("norm-cap must exceed 1", self.norm_cap > 1.0),
            (
                "tau0 must be positive and below tau1",
                self.tau0 > 0.0 && self.tau0 < self.tau1,
            ),
        ];
        for (msg, ok) in checks {
            if !ok {
                return Err(CliError::Usage(msg.into()));
            }
        }
        Ok(())
    }

    fn settings(&self) -> ContinuationSettings {
        ContinuationSettings {
            eps0: self.eps0,
            step: self.step,
            step_min: (self.step * 1e-3).min(1e-4),
            max_points: self.max_points,
            n_cap: self.n_cap,
            norm_cap: self.norm_cap,
            tol: self.tol,
            ..ContinuationSettings::default()
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("agespace-out"))
    }

    fn load_model(&self) -> CliResult<(ModelSpec, SpatialMesh, AgeGrid)> {
        let text = fs::read_to_string(&self.model).map_err(io_err(&self.model))?;
        let with_path = |source| CliError::Model {
            path: self.model.clone(),
            source,
        };
        let mut model = parse_model(&text).map_err(with_path)?;
        if self.nx.is_some() || self.na.is_some() {
            model = model.with_grid(self.nx.unwrap_or(model.nx), self.na.unwrap_or(model.na));
            model.validate().map_err(with_path)?;
        }
        let mesh = SpatialMesh::for_model(&model)?;
        let grid = AgeGrid::for_model(&model)?;
        Ok((model, mesh, grid))
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let config = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&config, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Executes one command, writing a short report to `log`.
pub fn run(config: &RunConfig, log: &mut dyn Write) -> CliResult<()> {
    config.validate()?;
    match config.command {
        Command::Normalize => run_normalize(config, log),
        Command::Trace => run_trace(config, log),
        Command::Fixedpoint => run_fixedpoint(config, log),
        Command::Verify => run_verify(config, log),
    }
}

fn say(log: &mut dyn Write, line: impl AsRef<str>) -> CliResult<()> {
    writeln!(log, "{}", line.as_ref()).map_err(io_err(Path::new("<stdout>")))
}

fn run_normalize(config: &RunConfig, log: &mut dyn Write) -> CliResult<()> {
    let (model, mesh, grid) = config.load_model()?;
    let (normalized, r_before) = normalize(&model, &mesh, &grid)?;
    say(log, format!("r_before = {}", fmt(r_before)))?;
    say(log, format!("cb = {}", fmt(normalized.birth_scale)))?;
    match &config.out {
        Some(path) => fs::write(path, normalized.to_config()).map_err(io_err(path))?,
        None => say(log, normalized.to_config())?,
    }
    Ok(())
}

fn write_profile(path: &Path, grid: &AgeGrid, u: &DensityField) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["age".to_string()];
    header.extend((1..=u.nx()).map(|i| format!("u_{i}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for (k, row) in u.rows().enumerate() {
        let mut rec = vec![fmt(grid.age(k))];
        rec.extend(row.iter().map(|&v| fmt(v)));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_profile(path: &Path, grid: &AgeGrid, nx: usize) -> CliResult<DensityField> {
    let data = |message: String| CliError::Data {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>().map_err(|e| data(format!("{e} in {s:?}"))))
            .collect::<CliResult<Vec<f64>>>()?;
        if vals.len() != nx {
            return Err(data(format!("expected {nx} density columns, found {}", vals.len())));
        }
        rows.push(vals);
    }
    if rows.len() != grid.na() + 1 {
        return Err(data(format!(
            "expected {} age rows, found {}",
            grid.na() + 1,
            rows.len()
        )));
    }
    DensityField::from_rows(&rows).map_err(|e| data(e.to_string()))
}

fn branch_record(index: usize, p: &BranchPoint) -> Vec<String> {
    let mut rec = vec![index.to_string()];
    rec.extend(
        [
            p.n,
            p.eps,
            p.r_qu,
            p.identity_residual,
            p.residual_direct,
            p.bifurcation_residual,
            p.min_u,
        ]
        .into_iter()
        .map(fmt),
    );
    rec
}

fn write_branch(dir: &Path, format: Format, branch: &Branch) -> CliResult<PathBuf> {
    match format {
        Format::Csv => {
            let path = dir.join("branch.csv");
            let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
            w.write_record(BRANCH_HEADER).map_err(csv_err(&path))?;
            for (i, p) in branch.points.iter().enumerate() {
                w.write_record(branch_record(i, p)).map_err(csv_err(&path))?;
            }
            w.flush().map_err(io_err(&path))?;
            Ok(path)
        }
        Format::Txt => {
            let path = dir.join("branch.txt");
            let mut s = String::new();
            for (i, p) in branch.points.iter().enumerate() {
                s.push_str("[[point]]\n");
                for (key, val) in BRANCH_HEADER.iter().zip(branch_record(i, p)) {
                    s.push_str(&format!("{key} = {val}\n"));
                }
                s.push('\n');
            }
            fs::write(&path, s).map_err(io_err(&path))?;
            Ok(path)
        }
    }
}

fn run_trace(config: &RunConfig, log: &mut dyn Write) -> CliResult<()> {
    let (model, mesh, grid) = config.load_model()?;
    let (normalized, r_before) = normalize(&model, &mesh, &grid)?;
    let cont = Continuation::new(&normalized, &mesh, &grid, config.settings())?;
    let branch = cont.trace()?;

    let dir = config.out_dir();
    let profiles = dir.join("profiles");
    fs::create_dir_all(&profiles).map_err(io_err(&profiles))?;
    let model_path = dir.join("model.toml");
    fs::write(&model_path, normalized.to_config()).map_err(io_err(&model_path))?;
    let branch_path = write_branch(&dir, config.format, &branch)?;
    for (i, p) in branch.points.iter().enumerate() {
        write_profile(&profiles.join(format!("profile_{i:04}.csv")), &grid, &p.u)?;
    }

    say(log, format!("r_before = {}", fmt(r_before)))?;
    say(log, format!("points = {}", branch.points.len()))?;
    say(log, format!("termination = {:?}", branch.termination))?;
    say(log, format!("branch = {}", branch_path.display()))?;
    if branch.points.len() < 2 {
        return Ok(());
    }
    let stats = branch_stats(&branch.points, cont.settings().tol_identity, f64::INFINITY)?;
    say(
        log,
        format!(
            "sigma_i = {}  sigma_s = {}  N_i = {}  N_s = {}",
            fmt(stats.sigma_i),
            fmt(stats.sigma_s),
            fmt(stats.n_i),
            fmt(stats.n_s)
        ),
    )?;
    let mut failed = Vec::new();
    for check in stats.checks.iter().take(3) {
        say(
            log,
            format!(
                "check {}: {} ({})",
                check.name,
                if check.passed { "ok" } else { "FAILED" },
                fmt(check.value)
            ),
        )?;
        if !check.passed {
            failed.push(check.name);
        }
    }
    if !failed.is_empty() {
        return Err(CliError::Invariant(failed.join("; ")));
    }
    Ok(())
}

fn write_fixedpoint(dir: &Path, format: Format, mesh: &SpatialMesh, b: &[f64], report: &ShellReport) -> CliResult<()> {
    let nodes = mesh.nodes();
    match format {
        Format::Csv => {
            let path = dir.join("fixedpoint_B.csv");
            let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
            w.write_record(["x", "B"]).map_err(csv_err(&path))?;
            for (x, v) in nodes.iter().zip(b) {
                w.write_record([fmt(*x), fmt(*v)]).map_err(csv_err(&path))?;
            }
            w.flush().map_err(io_err(&path))?;
            let path = dir.join("shell_report.csv");
            let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
            w.write_record(["radius", "norm", "r_Qu", "min_Q_minus_I"])
                .map_err(csv_err(&path))?;
            for s in &report.samples {
                let kind = if s.small { "tau0" } else { "tau1" };
                w.write_record([kind.to_string(), fmt(s.norm), fmt(s.r), fmt(s.min_q_minus_i)])
                    .map_err(csv_err(&path))?;
            }
            w.flush().map_err(io_err(&path))
        }
        Format::Txt => {
            let mut s = String::from("[fixedpoint]\n");
            s.push_str(&format!(
                "x = [{}]\n",
                nodes.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(", ")
            ));
            s.push_str(&format!(
                "B = [{}]\n\n[shell]\n",
                b.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(", ")
            ));
            s.push_str(&format!("tau0 = {}\ntau1 = {}\n", fmt(report.tau0), fmt(report.tau1)));
            s.push_str(&format!(
                "verdict_small = {}\nverdict_large = {}\n",
                report.verdict_small, report.verdict_large
            ));
            for smp in &report.samples {
                s.push_str(&format!(
                    "\n[[shell.sample]]\nradius = \"{}\"\nnorm = {}\nr_Qu = {}\nmin_Q_minus_I = {}\n",
                    if smp.small { "tau0" } else { "tau1" },
                    fmt(smp.norm),
                    fmt(smp.r),
                    fmt(smp.min_q_minus_i)
                ));
            }
            let path = dir.join("fixedpoint.txt");
            fs::write(&path, s).map_err(io_err(&path))
        }
    }
}

fn run_fixedpoint(config: &RunConfig, log: &mut dyn Write) -> CliResult<()> {
    let (model, mesh, grid) = config.load_model()?;
    let report = check_shell_conditions(
        &model,
        &mesh,
        &grid,
        config.tau0,
        config.tau1,
        SHELL_SAMPLES,
        config.seed,
    )?;
    say(
        log,
        format!("shell small-radius condition (Q(u) - I >= 0): {}", report.verdict_small),
    )?;
    say(
        log,
        format!("shell large-radius condition (r(Q(u)) <= 1): {}", report.verdict_large),
    )?;
    let outcomes = multistart(
        &model,
        &mesh,
        &grid,
        DEFAULT_STARTS,
        1.0,
        DEFAULT_DAMPING,
        config.tol,
        FIXEDPOINT_MAX_ITER,
        config.seed,
    );
    let mut found = None;
    for (i, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(FixedPointOutcome::Converged(fp)) => {
                say(log, format!("start {i}: converged in {} iterations", fp.iterations))?;
                found.get_or_insert(fp);
            }
            Ok(FixedPointOutcome::TrivialCollapse { iterations }) => say(
                log,
                format!("start {i}: collapsed to the trivial solution after {iterations} iterations"),
            )?,
            Err(e) => say(log, format!("start {i}: {e}"))?,
        }
    }
    let fp = found.ok_or_else(|| CliError::Invariant("no start reached a nontrivial fixed point".into()))?;
    let r = fixed_point_radius(&model, &mesh, &grid, &fp)?;
    say(log, format!("r(Q(u*)) = {}", fmt(r)))?;
    say(log, format!("residual = {}", fmt(fp.residual)))?;

    let dir = config.out_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_fixedpoint(&dir, config.format, &mesh, &fp.b, &report)?;
    write_profile(&dir.join("profile_fixedpoint.csv"), &grid, &fp.u)?;
    if (r - 1.0).abs() > 1e-6 {
        return Err(CliError::Invariant(format!(
            "fixed point must satisfy r(Q(u*)) = 1, got {}",
            fmt(r)
        )));
    }
    if fp.u.min() < 0.0 {
        return Err(CliError::Invariant("fixed point density is negative".into()));
    }
    Ok(())
}

struct StoredRow {
    index: usize,
    values: [f64; 7],
}

fn read_branch(path: &Path) -> CliResult<Vec<StoredRow>> {
    let data = |message: String| CliError::Data {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = r.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    if header != BRANCH_HEADER {
        return Err(data(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let index = rec[0]
            .parse::<usize>()
            .map_err(|e| data(format!("index {:?}: {e}", &rec[0])))?;
        let mut values = [0.0; 7];
        for (v, s) in values.iter_mut().zip(rec.iter().skip(1)) {
            *v = s.trim().parse().map_err(|e| data(format!("{e} in {s:?}")))?;
        }
        rows.push(StoredRow { index, values });
    }
    Ok(rows)
}

fn run_verify(config: &RunConfig, log: &mut dyn Write) -> CliResult<()> {
    if config.format != Format::Csv {
        return Err(CliError::Usage("verify reads CSV branch files only".into()));
    }
    let (model, mesh, grid) = config.load_model()?;
    let (normalized, _) = normalize(&model, &mesh, &grid)?;
    let cont = Continuation::new(&normalized, &mesh, &grid, config.settings())?;
    let dir = config.out_dir();
    let rows = read_branch(&dir.join("branch.csv"))?;
    let mut failures = Vec::new();
    let mut first_amplitude = None;
    for row in &rows {
        let path = dir.join("profiles").join(format!("profile_{:04}.csv", row.index));
        let stored = read_profile(&path, &grid, mesh.nx())?;
        let n = row.values[0];
        let b = stored.birth().to_vec();
        let label = format!("row {}", row.index);
        if b.iter().all(|&v| v == 0.0) {
            if (n * cont.trivial_point().r_qu - 1.0).abs() > cont.settings().tol_identity {
                failures.push(format!(
                    "{label}: branch identity n r(Q_u) = 1 fails at the trivial point"
                ));
            }
            continue;
        }
        let (u, _) = march(&normalized, &mesh, &grid, &b)?;
        let drift = u.max_abs_diff(&stored);
        if drift > 1e-12 * u.max_abs() {
            failures.push(format!(
                "{label}: stored profile is not the trajectory of its birth vector ({drift:e})"
            ));
        }
        let p = cont.diagnose(n, u, b, 0)?;
        first_amplitude.get_or_insert_with(|| cont.amplitude(&p.b));
        let s = cont.settings();
        if p.identity_residual > s.tol_identity {
            failures.push(format!(
                "{label}: branch identity n r(Q_u) = 1 violated, residual {:e} exceeds {:e}",
                p.identity_residual, s.tol_identity
            ));
        }
        let scale = p.b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if p.residual_direct > s.tol * scale + 1e-15 {
            failures.push(format!(
                "{label}: birth condition B = n l(u) violated, residual {:e}",
                p.residual_direct
            ));
        }
        if p.min_u < -s.tol_pos {
            failures.push(format!("{label}: density is negative, minimum {:e}", p.min_u));
        }
        if p.bifurcation_residual > BIFURCATION_RESIDUAL_TOL {
            failures.push(format!(
                "{label}: bifurcation-form residual {:e} exceeds {BIFURCATION_RESIDUAL_TOL:e}",
                p.bifurcation_residual
            ));
        }
        let recomputed = [p.n, p.eps, p.r_qu];
        for ((name, stored), fresh) in ["n", "eps", "r_Qu"].iter().zip(&row.values[..3]).zip(recomputed) {
            if (stored - fresh).abs() > 1e-9 * fresh.abs().max(1.0) {
                failures.push(format!(
                    "{label}: stored {name} {stored:e} differs from recomputed {fresh:e}"
                ));
            }
        }
    }
    if let Some(eps) = first_amplitude {
        let (d1, d2) = (cont.expansion_defect(eps)?, cont.expansion_defect(0.5 * eps)?);
        say(log, format!("local expansion defect ratio = {}", fmt(d1 / d2)))?;
        if d1 / d2 < 1.5 {
            failures.push(format!("local expansion is not o(eps): defect ratio {:.3}", d1 / d2));
        }
    }
    say(log, format!("verified {} rows", rows.len()))?;
    if failures.is_empty() {
        say(log, "all invariants hold")?;
        Ok(())
    } else {
        for f in &failures {
            say(log, format!("FAILED {f}"))?;
        }
        Err(CliError::Invariant(failures.join("; ")))
    }
}
