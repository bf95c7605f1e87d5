//! Command-line front end: argument parsing and the three commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use segflow::adapt::run_split_adapt_bregman;
use segflow::bregman::{evaluate_model, run_split_bregman, BregmanState, InitShape, Model};
use segflow::energy::{classify_pixels, pdf_csv};
use segflow::fem::ScalarFieldP1;
use segflow::imageio::{add_noise, encode_pgm, GreyImage, NoiseKind, NoiseSpec};
use segflow::mesh::{build_uniform_mesh, mesh_stats, TriMesh};
use segflow::synthetic::{dice, labels_from_mask, mask_image};

use crate::config::{parse_config, RunConfig};
use crate::error::CliError;
use crate::export::{
    contour_svg, field_checksum, log_csv, mesh_vtk, metric_csv, sha256_hex, timing_csv,
    zero_level_polylines,
};

#[derive(Parser, Debug)]
#[command(
    name = "segflow",
    version,
    about = "Split Bregman image segmentation on adaptive meshes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Segment one image.
    Segment(SegmentArgs),
    /// Write a noisy copy of an image.
    Noise(NoiseArgs),
    /// Run split and split-adapt Bregman on the same input and tabulate both.
    Compare(CompareArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Bayes,
    Rsfe,
}

impl From<ModelArg> for Model {
    fn from(m: ModelArg) -> Model {
        match m {
            ModelArg::Bayes => Model::Bayes,
            ModelArg::Rsfe => Model::Rsfe,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(clap::Args, Debug, Clone)]
pub struct RunArgs {
    /// Greyscale PGM (P2/P5) or PPM input.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `circle CX CY R`, `rect X0 Y0 X1 Y1` or `mask PATH`.
    #[arg(long, num_args = 2..=5, value_names = ["SHAPE", "ARGS"])]
    pub init: Option<Vec<String>>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Recorded in the manifest; the solver itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mask for the Dice score, interior above mid-grey.
    #[arg(long)]
    pub reference_mask: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Clone)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value = "off")]
    pub adapt: Switch,
}

#[derive(clap::Args, Debug, Clone)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(clap::Args, Debug, Clone)]
pub struct NoiseArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// gaussian, salt-and-pepper or speckle.
    #[arg(long)]
    pub kind: String,
    /// Variance on the [0, 1] scale, or corruption density for salt-and-pepper.
    #[arg(long)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("segflow: {e}");
        return e.exit_code();
    }
    let result = match cli.command {
        Command::Segment(a) => cmd_segment(&a).map(|_| ()),
        Command::Noise(a) => cmd_noise(&a),
        Command::Compare(a) => cmd_compare(&a).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("segflow: {e}");
            e.exit_code()
        }
    }
}

/// Applies `SEGFLOW_THREADS` to the global worker pool.
fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SEGFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        CliError::Usage(format!(
            "SEGFLOW_THREADS must be a positive integer, got '{raw}'"
        ))
    })?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_grey(path: &Path) -> Result<(GreyImage, String), CliError> {
    let bytes = read_input(path)?;
    let img = segflow::imageio::decode_netpbm(&bytes)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok((img, sha256_hex(&bytes)))
}

/// Everything a run needs besides the algorithm choice.
pub struct Prepared {
    pub img: GreyImage,
    pub image_sha256: String,
    pub cfg: RunConfig,
    pub mesh: TriMesh,
    pub phi0: ScalarFieldP1,
    pub init: String,
    pub reference: Option<(GreyImage, String)>,
}

pub fn prepare(args: &RunArgs) -> Result<Prepared, CliError> {
    let (img, image_sha256) = load_grey(&args.image)?;
    let flag_model = args.model.map(Model::from);
    let cfg = match &args.config {
        None => RunConfig::defaults(flag_model.unwrap_or(Model::Bayes)),
        Some(p) => {
            let text = String::from_utf8(read_input(p)?)
                .map_err(|_| CliError::Input(format!("{}: not UTF-8", p.display())))?;
            let cfg = parse_config(&text, flag_model.unwrap_or(Model::Bayes))?;
            if flag_model.is_some_and(|m| m != cfg.solver.model) {
                return Err(CliError::Usage(
                    "--model conflicts with \"model\" in the config".into(),
                ));
            }
            cfg
        }
    };
    let (w, h) = (img.width(), img.height());
    let mesh = build_uniform_mesh(w, h, cfg.mesh_spacing)
        .map_err(|e| CliError::Usage(format!("mesh_spacing: {e}")))?;
    let (shape, init) = parse_init(args.init.as_deref(), w as f64, h as f64)?;
    let phi0 = shape.level_set(&mesh, cfg.solver.alpha);
    let reference = match &args.reference_mask {
        None => None,
        Some(p) => {
            let (m, sum) = load_grey(p)?;
            if (m.width(), m.height()) != (w, h) {
                return Err(CliError::Input(format!(
                    "reference mask is {}x{}, image is {w}x{h}",
                    m.width(),
                    m.height()
                )));
            }
            Some((m, sum))
        }
    };
    Ok(Prepared {
        img,
        image_sha256,
        cfg,
        mesh,
        phi0,
        init,
        reference,
    })
}

fn parse_init(init: Option<&[String]>, w: f64, h: f64) -> Result<(InitShape, String), CliError> {
    let Some(parts) = init else {
        let r = w.min(h) / 4.0;
        return Ok((
            InitShape::Circle {
                cx: w / 2.0,
                cy: h / 2.0,
                r,
            },
            format!("circle {} {} {r}", w / 2.0, h / 2.0),
        ));
    };
    let nums = |n: usize| -> Result<Vec<f64>, CliError> {
        if parts.len() != n + 1 {
            return Err(CliError::Usage(format!(
                "--init {} takes {n} numbers",
                parts[0]
            )));
        }
        parts[1..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CliError::Usage(format!("--init: '{s}' is not a number")))
            })
            .collect()
    };
    let shape = match parts[0].as_str() {
        "circle" => {
            let v = nums(3)?;
            if !(v[2] > 0.0) {
                return Err(CliError::Usage("--init circle radius must be > 0".into()));
            }
            InitShape::Circle {
                cx: v[0],
                cy: v[1],
                r: v[2],
            }
        }
        "rect" => {
            let v = nums(4)?;
            InitShape::Rect {
                x0: v[0],
                y0: v[1],
                x1: v[2],
                y1: v[3],
            }
        }
        "mask" => {
            if parts.len() != 2 {
                return Err(CliError::Usage("--init mask takes one path".into()));
            }
            let (m, _) = load_grey(Path::new(&parts[1]))?;
            if (m.width() as f64, m.height() as f64) != (w, h) {
                return Err(CliError::Input(
                    "init mask size differs from the image".into(),
                ));
            }
            InitShape::Mask(m)
        }
        other => return Err(CliError::Usage(format!("unknown --init shape '{other}'"))),
    };
    Ok((shape, parts.join(" ")))
}

/// Summary of one finished run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub state: BregmanState,
    pub n_adapt: usize,
    pub dice: Option<f64>,
    pub metric: Option<Vec<segflow::tensor::Sym2>>,
    pub wall: f64,
}

pub fn execute(p: &Prepared, adapt: bool) -> Result<RunSummary, CliError> {
    let t = Instant::now();
    let (state, n_adapt, metric) = if adapt {
        let (st, ad) =
            run_split_adapt_bregman(&p.cfg.solver, &p.cfg.adapt, &p.img, &p.mesh, &p.phi0)?;
        let n = ad.events();
        (st, n, ad.last_metric.map(|m| m.tensors))
    } else {
        (
            run_split_bregman(&p.cfg.solver, &p.img, &p.mesh, &p.phi0)?,
            0,
            None,
        )
    };
    let dice = p.reference.as_ref().map(|(m, _)| {
        dice(
            &classify_pixels(&state.mesh, &state.phi, &p.img),
            &labels_from_mask(m),
        )
    });
    Ok(RunSummary {
        state,
        n_adapt,
        dice,
        metric,
        wall: t.elapsed().as_secs_f64(),
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn result_json(r: &RunSummary) -> Value {
    let st = &r.state;
    let stats = mesh_stats(&st.mesh);
    json!({
        "converged": st.converged,
        "iterations": st.k,
        "n_adapt": r.n_adapt,
        "n_el": stats.n_el,
        "h_min": stats.h_min,
        "h_max": stats.h_max,
        "max_stretching": stats.max_stretching,
        "remesh_warnings": st.remesh_warnings,
        "dice": r.dice,
        "timing": {
            "wall": r.wall,
            "opt_total": st.history.iter().map(|h| h.t_opt).sum::<f64>(),
            "adapt_total": st.history.iter().map(|h| h.t_adapt).sum::<f64>(),
        },
    })
}

fn write(dir: &Path, name: &str, bytes: &[u8], outputs: &mut Vec<String>) -> Result<(), CliError> {
    fs::write(dir.join(name), bytes)
        .map_err(|e| CliError::Internal(format!("{}: {e}", dir.join(name).display())))?;
    outputs.push(name.to_string());
    Ok(())
}

fn manifest_base(command: &str, args: &RunArgs, p: &Prepared) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(command));
    m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    m.insert("config".into(), p.cfg.to_json());
    m.insert("seed".into(), json!(args.seed));
    m.insert("init".into(), json!(p.init));
    m.insert("phi0_sha256".into(), json!(field_checksum(&p.phi0)));
    m.insert(
        "input".into(),
        json!({"path": args.image.display().to_string(), "sha256": p.image_sha256}),
    );
    m.insert(
        "reference_mask".into(),
        match (&args.reference_mask, &p.reference) {
            (Some(path), Some((_, sum))) => {
                json!({"path": path.display().to_string(), "sha256": sum})
            }
            _ => Value::Null,
        },
    );
    m
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

pub fn cmd_segment(args: &SegmentArgs) -> Result<RunSummary, CliError> {
    let p = prepare(&args.run)?;
    let adapt = args.adapt == Switch::On;
    let r = execute(&p, adapt)?;
    let dir = &args.run.out_dir;
    create_dir(dir)?;
    let st = &r.state;
    let mut outputs = Vec::new();
    let labels = classify_pixels(&st.mesh, &st.phi, &p.img);
    write(
        dir,
        "mask.pgm",
        &encode_pgm(&mask_image(&labels)),
        &mut outputs,
    )?;
    let lines = zero_level_polylines(&st.mesh, &st.phi);
    let svg = contour_svg(st.mesh.width(), st.mesh.height(), &lines);
    write(dir, "contour.svg", svg.as_bytes(), &mut outputs)?;
    write(
        dir,
        "mesh.vtk",
        mesh_vtk(&st.mesh, &st.phi).as_bytes(),
        &mut outputs,
    )?;
    write(
        dir,
        "log.csv",
        log_csv(&st.history).as_bytes(),
        &mut outputs,
    )?;
    write(
        dir,
        "timing.csv",
        timing_csv(&st.history).as_bytes(),
        &mut outputs,
    )?;
    if let Some((pi, pe)) = evaluate_model(&p.cfg.solver, &p.img, &st.mesh, &st.phi).pdfs {
        write(dir, "pdf.csv", pdf_csv(&pi, &pe).as_bytes(), &mut outputs)?;
    }
    if let Some(m) = &r.metric {
        write(dir, "metric.csv", metric_csv(m).as_bytes(), &mut outputs)?;
    }
    let mut man = manifest_base("segment", &args.run, &p);
    man.insert("model".into(), json!(model_name(p.cfg.solver.model)));
    man.insert("adapt".into(), json!(adapt));
    man.insert("log".into(), json!("log.csv"));
    man.insert("result".into(), result_json(&r));
    outputs.push("manifest.json".into());
    man.insert("outputs".into(), json!(outputs));
    let text = serde_json::to_string_pretty(&Value::Object(man)).expect("manifest serialises");
    fs::write(dir.join("manifest.json"), text)?;
    if !st.converged {
        return Err(CliError::NotConverged(st.k));
    }
    Ok(r)
}

fn model_name(m: Model) -> &'static str {
    match m {
        Model::Bayes => "bayes",
        Model::Rsfe => "rsfe",
    }
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "method",
    "n_opt",
    "n_adapt",
    "t_opt_mean",
    "t_adapt_mean",
    "n_el",
    "h_min",
    "h_max",
    "s_k",
];

fn report_row(method: &str, r: &RunSummary) -> String {
    let st = &r.state;
    let stats = mesh_stats(&st.mesh);
    let t_opt = mean(st.history.iter().map(|h| h.t_opt));
    let t_adapt = mean(st.history.iter().filter(|h| h.adapted).map(|h| h.t_adapt));
    let mut row = format!(
        "{method},{},{},{t_opt:.6},{t_adapt:.6},{},{},{},{}",
        st.k, r.n_adapt, stats.n_el, stats.h_min, stats.h_max, stats.max_stretching
    );
    if let Some(d) = r.dice {
        row.push_str(&format!(",{d}"));
    }
    row
}

pub fn cmd_compare(args: &CompareArgs) -> Result<(RunSummary, RunSummary), CliError> {
    let p = prepare(&args.run)?;
    let split = execute(&p, false)?;
    let adapted = execute(&p, true)?;
    let dir = &args.run.out_dir;
    create_dir(dir)?;
    let mut header = REPORT_COLUMNS.join(",");
    if p.reference.is_some() {
        header.push_str(",dice");
    }
    let report = format!(
        "{header}\n{}\n{}\n",
        report_row("split", &split),
        report_row("split_adapt", &adapted)
    );
    let mut outputs = Vec::new();
    write(dir, "report.csv", report.as_bytes(), &mut outputs)?;
    let mut man = manifest_base("compare", &args.run, &p);
    man.insert("model".into(), json!(model_name(p.cfg.solver.model)));
    let checksum = field_checksum(&p.phi0);
    man.insert(
        "runs".into(),
        json!({
            "split": {"phi0_sha256": checksum, "result": result_json(&split)},
            "split_adapt": {"phi0_sha256": checksum, "result": result_json(&adapted)},
        }),
    );
    outputs.push("manifest.json".into());
    man.insert("outputs".into(), json!(outputs));
    let text = serde_json::to_string_pretty(&Value::Object(man)).expect("manifest serialises");
    fs::write(dir.join("manifest.json"), text)?;
    if !split.state.converged {
        return Err(CliError::NotConverged(split.state.k));
    }
    if !adapted.state.converged {
        return Err(CliError::NotConverged(adapted.state.k));
    }
    Ok((split, adapted))
}

pub fn cmd_noise(args: &NoiseArgs) -> Result<(), CliError> {
    let (img, _) = load_grey(&args.image)?;
    let kind: NoiseKind = args
        .kind
        .parse()
        .map_err(|e: segflow::imageio::ImageError| CliError::Usage(e.to_string()))?;
    let spec =
        NoiseSpec::new(kind, args.level, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let noisy = add_noise(&img, &spec).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(&args.out, encode_pgm(&noisy))
        .map_err(|e| CliError::Internal(format!("{}: {e}", args.out.display())))?;
    Ok(())
}

/// Checks a segment manifest against the documented schema.
pub fn validate_manifest(v: &Value) -> Result<(), String> {
    let obj = v.as_object().ok_or("manifest is not an object")?;
    let need = |k: &str, ok: fn(&Value) -> bool| -> Result<(), String> {
        match obj.get(k) {
            Some(x) if ok(x) => Ok(()),
            Some(_) => Err(format!("\"{k}\" has the wrong type")),
            None => Err(format!("missing \"{k}\"")),
        }
    };
    need("command", Value::is_string)?;
    need("version", Value::is_string)?;
    need("config", Value::is_object)?;
    need("seed", Value::is_u64)?;
    need("init", Value::is_string)?;
    need("phi0_sha256", Value::is_string)?;
    need("input", |x| {
        x.get("path").is_some_and(Value::is_string) && x.get("sha256").is_some_and(Value::is_string)
    })?;
    need("reference_mask", |x| {
        x.is_null() || x.get("sha256").is_some_and(Value::is_string)
    })?;
    need("outputs", |x| {
        x.as_array().is_some_and(|a| a.iter().all(Value::is_string))
    })?;
    need("model", Value::is_string)?;
    if obj["command"] == "segment" {
        need("adapt", Value::is_boolean)?;
        need("log", Value::is_string)?;
        need("result", |r| {
            ["converged"]
                .iter()
                .all(|k| r.get(*k).is_some_and(Value::is_boolean))
                && ["iterations", "n_adapt", "n_el", "remesh_warnings"]
                    .iter()
                    .all(|k| r.get(*k).is_some_and(Value::is_u64))
                && ["h_min", "h_max", "max_stretching"]
                    .iter()
                    .all(|k| r.get(*k).is_some_and(Value::is_number))
                && r.get("dice").is_some_and(|d| d.is_null() || d.is_number())
                && r.get("timing").is_some_and(Value::is_object)
        })?;
    } else {
        need("runs", Value::is_object)?;
    }
    Ok(())
}
