use std::path::PathBuf;

use clap::Args;
use fibrae::autodiff::Tensor;
use fibrae::data_io::{read_numeric_table, write_atomic};
use fibrae::metrics::{grouping_report, LabeledCloud, DEFAULT_PERPLEXITY};

use crate::{CmdResult, Failure};

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// CSV with numeric coordinates and a label column.
    #[arg(long)]
    points: PathBuf,
    /// Name of the label column.
    #[arg(long)]
    labels: String,
    #[arg(long, default_value_t = DEFAULT_PERPLEXITY)]
    perplexity: f64,
    /// Include every point's LISI in the report.
    #[arg(long)]
    per_point: bool,
    /// Also report the variance split with equally weighted groups.
    #[arg(long)]
    unweighted: bool,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: MetricsArgs) -> CmdResult {
    let table = read_numeric_table(&args.points, &[args.labels.as_str()])?;
    let n = table.rows.len();
    let d = table.feature_names.len();
    if d == 0 {
        return Err(Failure::Usage(format!("{} has no numeric columns", args.points.display())));
    }
    let points = Tensor::matrix(n, d, table.rows.concat())?;
    let names = &table.labels[0].1;
    let cloud = LabeledCloud::from_names(points, names)?;
    let report = grouping_report(&cloud, args.perplexity, args.per_point, args.unweighted)?;

    let mut json = serde_json::to_value(&report).map_err(|e| Failure::Usage(e.to_string()))?;
    json["points"] = n.into();
    json["groups"] = cloud.groups.into();
    json["perplexity"] = args.perplexity.into();
    let text = serde_json::to_string_pretty(&json).map_err(|e| Failure::Usage(e.to_string()))? + "\n";
    match &args.out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
