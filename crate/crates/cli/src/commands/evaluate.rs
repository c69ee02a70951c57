use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use xattn_core::analysis::{gram_distance, image_tensor, structure_iou, FeatureExtractor, SeededConvStack};
use xattn_core::io::image::{load_mask, read_rgb};

use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// CSV with columns `name,struct,app`; relative paths resolve against its directory.
    #[arg(long, value_name = "CSV")]
    pub pairs: PathBuf,
    /// Directory holding `<name>.png` outputs.
    #[arg(long, value_name = "DIR")]
    pub outputs: PathBuf,
    /// Directory holding `<name>_out.png` and `<name>_struct.png` masks.
    #[arg(long, value_name = "DIR")]
    pub masks: PathBuf,
    /// Write `metrics.csv` and `metrics.txt` here instead of printing the CSV.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub name: String,
    pub structure_iou: Option<f64>,
    pub appearance_gram: Option<f64>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn score_pair(
    name: &str,
    app: &Path,
    outputs: &Path,
    masks: &Path,
    extractor: &SeededConvStack,
) -> PairScore {
    let out_path = outputs.join(format!("{name}.png"));
    let iou = (|| {
        let mo = load_mask(masks.join(format!("{name}_out.png"))).ok()?;
        let ms = load_mask(masks.join(format!("{name}_struct.png"))).ok()?;
        out_path.is_file().then_some(())?;
        structure_iou(&mo, &ms).ok()
    })();
    let gram = (|| {
        let fo = extractor.extract(&image_tensor(&read_rgb(&out_path).ok()?)).ok()?;
        let fa = extractor.extract(&image_tensor(&read_rgb(app).ok()?)).ok()?;
        let weights = vec![1.0 / fo.len() as f64; fo.len()];
        gram_distance(&fo, &fa, &weights).ok()
    })();
    PairScore {
        name: name.to_string(),
        structure_iou: iou,
        appearance_gram: gram,
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| format!("{x:.6}"))
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<Vec<PairScore>> {
    let mut reader = csv::Reader::from_path(&args.pairs)
        .map_err(|e| CliError::config(format!("{}: {e}", args.pairs.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::config(format!("pairs header: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::config(format!("pairs CSV lacks a '{name}' column")))
    };
    let (ci, ai) = (col("name")?, col("app")?);
    col("struct")?;
    let base = args.pairs.parent().unwrap_or(Path::new("."));
    let extractor = SeededConvStack::new(0, 3);
    let mut scores = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| CliError::config(format!("pairs CSV: {e}")))?;
        let name = row.get(ci).unwrap_or("").trim();
        let app = resolve(base, row.get(ai).unwrap_or("").trim());
        scores.push(score_pair(name, &app, &args.outputs, &args.masks, &extractor));
    }
    if scores.is_empty() {
        return Err(CliError::config("pairs CSV has no rows"));
    }
    Ok(scores)
}

pub fn to_csv(scores: &[PairScore]) -> String {
    let mut s = String::from("pair,structure_iou,appearance_gram\n");
    for p in scores {
        let _ = writeln!(s, "{},{},{}", p.name, cell(p.structure_iou), cell(p.appearance_gram));
    }
    let _ = writeln!(
        s,
        "mean,{},{}",
        cell(mean(scores.iter().map(|p| p.structure_iou))),
        cell(mean(scores.iter().map(|p| p.appearance_gram)))
    );
    s
}

pub fn summary(scores: &[PairScore]) -> String {
    let scored = |f: fn(&PairScore) -> Option<f64>| scores.iter().filter(|p| f(p).is_some()).count();
    format!(
        "pairs = {}\nscored_iou = {}\nscored_gram = {}\nmean_structure_iou = {}\nmean_appearance_gram = {}\nextractor = seeded-conv5 (seed 0, layers conv1..conv5, equal weights)\n",
        scores.len(),
        scored(|p| p.structure_iou),
        scored(|p| p.appearance_gram),
        cell(mean(scores.iter().map(|p| p.structure_iou))),
        cell(mean(scores.iter().map(|p| p.appearance_gram))),
    )
}

pub fn run(args: &EvaluateArgs) -> CliResult {
    if !args.pairs.is_file() {
        return Err(CliError::config(format!("pairs file not found: {}", args.pairs.display())));
    }
    let scores = evaluate(args)?;
    let csv_text = to_csv(&scores);
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("metrics.csv"), &csv_text)?;
            fs::write(dir.join("metrics.txt"), summary(&scores))?;
        }
        None => {
            print!("{csv_text}");
            eprint!("{}", summary(&scores));
        }
    }
    if scores.iter().all(|p| p.structure_iou.is_none() && p.appearance_gram.is_none()) {
        return Err(CliError::new(1, "no pair could be scored"));
    }
    Ok(())
}
