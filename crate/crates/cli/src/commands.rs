//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sono_align::dataset::{generate_synthetic, load_jsonl, save_jsonl, split_records, SampleRecord, Split};
use sono_align::eval::{evaluate, export_embeddings};
use sono_align::graph::build_graph;
use sono_align::prior::{export_prior, prior_matrix};
use sono_align::trainer::{fit, load_checkpoint, save_checkpoint};
use sono_align::{Ablation, Error, Result, SplitAssignment, TaxonomyCatalog};

use crate::config::{RunConfig, SEED_ENV};
use crate::CatalogArgs;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SPLIT_FILE: &str = "split.json";

/// Config and catalog shared by every command.
pub struct Context {
    pub config: RunConfig,
    pub catalog: TaxonomyCatalog,
}

impl Context {
    pub fn load(args: &CatalogArgs) -> Result<Self> {
        let mut config = RunConfig::load_or_default(args.config.as_deref())?;
        if let Some(seed) = config.apply_seed_env()? {
            eprintln!("using training seed {seed} from {SEED_ENV}");
        }
        let catalog = config.catalog(&args.sim_tables)?;
        config.validate(&catalog)?;
        Ok(Context { config, catalog })
    }

    fn data_path(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or_else(|| self.config.paths.data.clone())
            .ok_or_else(|| Error::Validation("no data file: pass --data or set paths.data".into()))
    }

    fn records(&self, flag: Option<PathBuf>) -> Result<Vec<SampleRecord>> {
        load_jsonl(&self.data_path(flag)?, &self.catalog)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn find<'a>(records: &'a [SampleRecord], image_id: &str) -> Result<&'a SampleRecord> {
    records
        .iter()
        .find(|r| r.image_id == image_id)
        .ok_or_else(|| Error::Validation(format!("unknown image id {image_id:?}")))
}

pub fn gen_data(ctx: &Context, out: &Path) -> Result<()> {
    let records = generate_synthetic(&ctx.catalog, &ctx.config.synth)?;
    let split = split_records(&records, ctx.config.split.ratios, ctx.config.split.seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_jsonl(&out.join(RECORDS_FILE), &records, &ctx.catalog)?;
    split.save(&out.join(SPLIT_FILE))?;
    let [train, val, test] = split.counts();
    println!("{} records from {} cases", records.len(), split.len());
    println!("split (cases): train {train}, val {val}, test {test}");
    Ok(())
}

pub struct TrainArgs {
    pub data: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub ablation: Option<Ablation>,
}

fn default_log_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("train");
    checkpoint.with_file_name(format!("{stem}.log.jsonl"))
}

pub fn train(ctx: Context, args: TrainArgs) -> Result<()> {
    let mut config = ctx.config.train;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(a) = args.ablation {
        config.ablation = a;
    }
    config.validate()?;
    let records = ctx.records(args.data)?;
    let split = match args.split.or_else(|| ctx.config.paths.split.clone()) {
        Some(p) => SplitAssignment::load(&p)?,
        None => split_records(&records, ctx.config.split.ratios, ctx.config.split.seed)?,
    };
    let out = args
        .out
        .or_else(|| ctx.config.paths.checkpoint.clone())
        .ok_or_else(|| Error::Validation("no checkpoint path: pass --out or set paths.checkpoint".into()))?;
    let log_path = args
        .log
        .or_else(|| ctx.config.paths.log.clone())
        .unwrap_or_else(|| default_log_path(&out));
    let mut log = create(&log_path)?;
    let outcome = fit(&records, &split, &config, &ctx.catalog, Some(&mut log));
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let outcome = outcome?;
    save_checkpoint(&outcome.best, &config, &ctx.catalog, &out)?;

    let report = &outcome.report;
    println!(
        "trained {} epochs ({}) on {} records; best epoch {}",
        config.epochs, config.ablation, report.n_train, report.best_epoch
    );
    let val = split.select(&records, Split::Val);
    if val.is_empty() {
        println!("no validation records");
    } else {
        let metrics = evaluate(&outcome.best.model, &val, &ctx.catalog, &ctx.config.ks)?;
        println!("validation metrics");
        print!("{}", metrics.render_table());
    }
    println!("checkpoint: {}", out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub split: Option<Split>,
    pub manifest: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub ks: Vec<usize>,
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<()> {
    let (state, _) = load_checkpoint(&args.checkpoint, &ctx.catalog)?;
    let records = ctx.records(args.data)?;
    let selected: Vec<&SampleRecord> = match args.split {
        Some(part) => {
            let path = args
                .manifest
                .or_else(|| ctx.config.paths.split.clone())
                .ok_or_else(|| Error::Validation("--split needs --manifest or paths.split".into()))?;
            let manifest = SplitAssignment::load(&path)?;
            manifest.check_covers(&records)?;
            manifest.select(&records, part)
        }
        None => records.iter().collect(),
    };
    if selected.is_empty() {
        return Err(Error::Validation("no records to evaluate".into()));
    }
    let ks = if args.ks.is_empty() { ctx.config.ks.clone() } else { args.ks };
    if ks.contains(&0) {
        return Err(Error::Validation("retrieval cutoffs must be positive".into()));
    }
    let report = evaluate(&state.model, &selected, &ctx.catalog, &ks)?;
    print!("{}", report.render_table());
    let skipped = report.skipped_tasks();
    if !skipped.is_empty() {
        let names: Vec<String> = skipped.iter().map(ToString::to_string).collect();
        println!("skipped tasks (no labels): {}", names.join(", "));
    }
    if let Some(path) = args.report.or_else(|| ctx.config.paths.report.clone()) {
        write_text(&path, &report.to_json()?)?;
    }
    Ok(())
}

pub fn show_prior(ctx: &Context, data: Option<PathBuf>, ids: &[String], out: Option<PathBuf>) -> Result<()> {
    let records = ctx.records(data)?;
    let batch = ids.iter().map(|id| find(&records, id)).collect::<Result<Vec<_>>>()?;
    let prior = prior_matrix(&batch, &ctx.catalog)?;
    let width = ids.iter().map(String::len).max().unwrap_or(0).max(8);
    let header = |title: &str| {
        let mut line = format!("{title:<width$}");
        for id in ids {
            line.push_str(&format!(" {id:>width$}"));
        }
        line
    };
    println!("{}", header("prior"));
    for (i, id) in ids.iter().enumerate() {
        let mut line = format!("{id:<width$}");
        for j in 0..ids.len() {
            line.push_str(&format!(" {:>width$.6}", prior.get(i, j)));
        }
        println!("{line}");
    }
    println!();
    println!("{}", header("coverage"));
    for (i, id) in ids.iter().enumerate() {
        let mut line = format!("{id:<width$}");
        for j in 0..ids.len() {
            line.push_str(&format!(" {:>width$}", prior.coverage(i, j)));
        }
        println!("{line}");
    }
    if let Some(path) = out {
        export_prior(&prior, &path)?;
    }
    Ok(())
}

pub fn inspect_graph(ctx: &Context, data: Option<PathBuf>, image_id: &str, dot: Option<PathBuf>) -> Result<()> {
    let records = ctx.records(data)?;
    let graph = build_graph(find(&records, image_id)?);
    print!("{}", graph.render_text(&ctx.catalog));
    if let Some(path) = dot {
        write_text(&path, &graph.to_dot(&ctx.catalog))?;
    }
    Ok(())
}

pub fn export(ctx: &Context, checkpoint: &Path, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let (state, _) = load_checkpoint(checkpoint, &ctx.catalog)?;
    let records = ctx.records(data)?;
    let out = out
        .or_else(|| ctx.config.paths.embeddings.clone())
        .ok_or_else(|| Error::Validation("no output path: pass --out or set paths.embeddings".into()))?;
    export_embeddings(&state.model, &records, &ctx.catalog, &out)?;
    println!("wrote {} rows to {}", records.len(), out.display());
    Ok(())
}
