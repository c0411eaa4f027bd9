use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use fibrae::autodiff::Tensor;
use fibrae::data_io::{load_model, read_numeric_table, write_atomic, ModelArchive};
use fibrae::geodesic::{
    correspondence_csv, correspondence_map, interpolate, path_trace_csv, solve_geodesic, TransportResult,
};
use fibrae::geometry::LatentPoint;

use crate::{CmdResult, Failure, SolverArgs};

#[derive(Args, Debug)]
pub struct TransportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Source condition, by name or id.
    #[arg(long)]
    from_condition: String,
    /// Target condition, by name or id.
    #[arg(long)]
    to_condition: String,
    /// CSV of fiber coordinates (`f_0..f_{m-1}`) or of raw samples.
    #[arg(long)]
    input: PathBuf,
    /// Label column of a sample CSV; only rows of the source condition are
    /// transported.
    #[arg(long)]
    condition_column: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct PointArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "from", alias = "from-condition")]
    from: String,
    #[arg(long = "to", alias = "to-condition")]
    to: String,
    /// Fiber coordinates of the start, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Vec<f64>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[command(flatten)]
    point: PointArgs,
    /// Path CSV: `t, z_0.., seg_energy`.
    #[arg(long)]
    out: PathBuf,
    /// Number of decoded frames written to `--frames-out`.
    #[arg(long, default_value_t = 0)]
    frames: usize,
    #[arg(long, requires = "frames")]
    frames_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[command(flatten)]
    point: PointArgs,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Frame CSV: `t, x_0..x_{D-1}`.
    #[arg(long)]
    out: PathBuf,
    /// Keep decoded values in the normalized `[0, 1]` scale.
    #[arg(long)]
    normalized: bool,
}

fn load(path: &Path) -> Result<ModelArchive, Failure> {
    Ok(load_model(path)?)
}

/// Fiber coordinates from a fiber CSV, or encoded samples from a data CSV.
fn read_fibers(args: &TransportArgs, archive: &ModelArchive, from: usize) -> Result<Vec<Vec<f64>>, Failure> {
    let labels: Vec<&str> = args.condition_column.iter().map(String::as_str).collect();
    let table = read_numeric_table(&args.input, &labels)?;
    let m = archive.model.arch.fiber_dim;
    let d = archive.model.arch.input_dim;
    let keep: Vec<bool> = match table.labels.first() {
        Some((_, values)) => values
            .iter()
            .map(|v| archive.condition_id(v).ok() == Some(from))
            .collect(),
        None => vec![true; table.rows.len()],
    };
    let rows = table.rows.iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| r);

    let fiber_names: Vec<String> = (0..m).map(|i| format!("f_{i}")).collect();
    if table.feature_names == fiber_names {
        let fibers: Vec<Vec<f64>> = rows.cloned().collect();
        if fibers.iter().flatten().any(|v| v.abs() > 1.0) {
            log::warn!("some fiber coordinates lie outside [-1, 1]");
        }
        return Ok(fibers);
    }
    if table.feature_names.len() != d {
        return Err(Failure::Usage(format!(
            "input has {} numeric columns; expected the fiber columns {fiber_names:?} or {d} sample features",
            table.feature_names.len()
        )));
    }
    rows.map(|r| {
        let x: Vec<f64> = match &archive.ranges {
            Some(ranges) => r
                .iter()
                .zip(ranges)
                .map(|(v, (lo, hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
                .collect(),
            None => r.clone(),
        };
        Ok(archive.model.encode(&x)?)
    })
    .collect()
}

fn all_ok(results: Vec<fibrae::Result<TransportResult>>) -> Result<Vec<TransportResult>, Failure> {
    let mut out = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        out.push(r.map_err(|e| {
            let f = Failure::from(e);
            match f {
                Failure::Numerical(m) => Failure::Numerical(format!("point {i}: {m}")),
                Failure::Usage(m) => Failure::Usage(format!("point {i}: {m}")),
            }
        })?);
    }
    Ok(out)
}

pub fn run_transport(args: TransportArgs) -> CmdResult {
    let solver = args.solver.resolve()?;
    let archive = load(&args.model)?;
    let from = archive.condition_id(&args.from_condition)?;
    let to = archive.condition_id(&args.to_condition)?;
    let model = &archive.model;
    let fibers = read_fibers(&args, &archive, from)?;
    let b1 = model.embed(from)?;
    let b2 = model.embed(to)?;
    let starts: Vec<LatentPoint> = fibers.into_iter().map(|f| LatentPoint::new(f, b1.clone())).collect();
    let results = all_ok(correspondence_map(model, &starts, &b2, &solver))?;
    let unconverged = results.iter().filter(|r| !r.converged).count();
    if unconverged > 0 {
        log::warn!("{unconverged} of {} solves hit the iteration limit", results.len());
    }
    write_atomic(&args.out, correspondence_csv(model.arch.fiber_dim, &results).as_bytes())?;
    println!("transported {} point(s) to {}", results.len(), args.out.display());
    Ok(())
}

fn solve_point(p: &PointArgs) -> Result<(ModelArchive, TransportResult), Failure> {
    let solver = p.solver.resolve()?;
    let archive = load(&p.model)?;
    let from = archive.condition_id(&p.from)?;
    let to = archive.condition_id(&p.to)?;
    let m = archive.model.arch.fiber_dim;
    if p.point.len() != m {
        return Err(Failure::Usage(format!(
            "--point has {} coordinate(s), the model's fiber has {m}",
            p.point.len()
        )));
    }
    let start = LatentPoint::new(p.point.clone(), archive.model.embed(from)?);
    let b2 = archive.model.embed(to)?;
    let result = solve_geodesic(&archive.model, &start, &b2, &solver)?;
    if !result.converged {
        log::warn!("solve stopped at the iteration limit ({})", result.iterations);
    }
    Ok((archive, result))
}

fn frames_csv(archive: &ModelArchive, result: &TransportResult, frames: usize, normalized: bool) -> Result<String, Failure> {
    let decoded = interpolate(&archive.model, result, frames)?;
    let d = archive.model.arch.input_dim;
    let mut s = String::from("t");
    for i in 0..d {
        let _ = write!(s, ",x_{i}");
    }
    s.push('\n');
    for (k, row) in decoded.iter().enumerate() {
        let t = if frames == 1 { 0.0 } else { k as f64 / (frames - 1) as f64 };
        let row = match (&archive.ranges, normalized) {
            (Some(ranges), false) => {
                let x = Tensor::matrix(1, d, row.clone()).map_err(Failure::from)?;
                fibrae::data_io::denormalize(&x, ranges)?.into_data()
            }
            _ => row.clone(),
        };
        let _ = write!(s, "{t}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn run_trace(args: TraceArgs) -> CmdResult {
    let (archive, result) = solve_point(&args.point)?;
    write_atomic(&args.out, path_trace_csv(&result).as_bytes())?;
    if let Some(path) = &args.frames_out {
        write_atomic(path, frames_csv(&archive, &result, args.frames, false)?.as_bytes())?;
    }
    println!(
        "energy {:.6e}, length {:.6}, residual {:.3e}, endpoint {:?}",
        result.energy, result.length, result.residual, result.endpoint.f
    );
    Ok(())
}

pub fn run_interpolate(args: InterpolateArgs) -> CmdResult {
    let (archive, result) = solve_point(&args.point)?;
    write_atomic(&args.out, frames_csv(&archive, &result, args.frames, args.normalized)?.as_bytes())?;
    println!("wrote {} frame(s) to {}", args.frames, args.out.display());
    Ok(())
}
