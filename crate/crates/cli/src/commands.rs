use aofl::data::{load_dataset, split, synth_generate, write_dataset, ConversationSet};
use aofl::model::{load_checkpoint, write_checkpoint, ModelParams};
use aofl::train::{
    angle_report, evaluate, history_csv, run_ablation, train, ConfusionMatrix, EvalReport, TrainConfig, Variant,
};
use serde_json::json;

use crate::args::{AblateArgs, DataArgs, EvalArgs, InspectArgs, Part, SynthArgs, TrainArgs};
use crate::error::CliError;
use crate::output::Staging;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const CHECKPOINT: &str = "checkpoint.aofl";

fn pretty<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn finish(staging: Staging) -> Result<(), CliError> {
    for path in staging.commit()? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let spec = args.resolve()?;
    let synthetic = synth_generate(&spec)?;
    let set = &synthetic.set;
    let staging = Staging::new(&args.out)?;
    write_dataset(set, staging.dir())?;
    staging.write(RESOLVED_CONFIG, pretty(&spec))?;
    finish(staging)?;
    println!(
        "{} conversations, {} utterances, d = {}",
        set.len(),
        set.num_utterances(),
        set.dim()
    );
    for (name, count) in set.class_names().iter().zip(set.class_counts()) {
        println!("  {name:<12} {count:>6}");
    }
    Ok(())
}

fn load_splits(data: &DataArgs, seed: u64) -> Result<(ConversationSet, [ConversationSet; 3]), CliError> {
    let set = load_dataset(&data.data)?;
    let parts = split(&set, data.split, seed)?;
    Ok((set, parts))
}

pub fn train_cmd(args: &TrainArgs) -> Result<(), CliError> {
    let config = args.config.resolve(None)?;
    let (set, [train_set, valid_set, test_set]) = load_splits(&args.data, config.seed)?;
    let dims = config.model_dims(set.dim(), set.num_classes())?;
    let resolved = config.resolved(&dims);
    println!(
        "training on {} / {} / {} conversations (train / valid / test), {} parameters",
        train_set.len(),
        valid_set.len(),
        test_set.len(),
        dims.param_count()
    );
    let (params, history) = train(&resolved, &train_set, &valid_set)?;
    let test = if test_set.is_empty() {
        None
    } else {
        Some(evaluate(&params, &test_set, &resolved)?)
    };

    let mut checkpoint = Vec::new();
    write_checkpoint(&params, &mut checkpoint)?;
    let summary = json!({
        "best_epoch": history.best_epoch,
        "warmup_angle_grad_max": history.warmup_angle_grad_max,
        "split": args.data.split,
        "conversations": [train_set.len(), valid_set.len(), test_set.len()],
        "test": test,
    });
    let staging = Staging::new(&args.out)?;
    staging.write(CHECKPOINT, checkpoint)?;
    staging.write("history.csv", history_csv(&history))?;
    staging.write("summary.json", pretty(&summary))?;
    staging.write(RESOLVED_CONFIG, pretty(&resolved))?;
    finish(staging)?;

    if let Some(best) = history.best_epoch {
        println!("best epoch {best}");
    }
    if let Some(report) = &test {
        println!(
            "test accuracy {:.4}, weighted F1 {:.4}",
            report.accuracy, report.weighted_f1
        );
    }
    Ok(())
}

/// Loads the checkpoint, the config it was trained with (unless given),
/// and the requested part of the dataset, checking that they agree.
fn load_scoring_inputs(args: &EvalArgs) -> Result<(ModelParams, TrainConfig, ConversationSet), CliError> {
    let params = load_checkpoint(&args.checkpoint)?;
    let beside = args.checkpoint.parent().map(|p| p.join(RESOLVED_CONFIG));
    let fallback = beside.as_deref().filter(|p| p.is_file());
    let config = args.config.resolve(fallback)?;
    let set = load_dataset(&args.data.data)?;
    let dims = params.dims;
    if dims.d != set.dim() || dims.num_classes != set.num_classes() {
        return Err(CliError::Data(format!(
            "checkpoint {} has d = {}, num_classes = {} but dataset {} has d = {}, num_classes = {}",
            args.checkpoint.display(),
            dims.d,
            dims.num_classes,
            args.data.data.display(),
            set.dim(),
            set.num_classes()
        )));
    }
    let set = match args.part {
        Part::All => set,
        part => {
            let [tr, va, te] = split(&set, args.data.split, config.seed)?;
            match part {
                Part::Train => tr,
                Part::Valid => va,
                _ => te,
            }
        }
    };
    if set.is_empty() {
        return Err(CliError::Usage(format!("the {:?} part of the split is empty", args.part).to_lowercase()));
    }
    Ok((params, config, set))
}

fn confusion_csv(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let mut out = String::from("true\\predicted");
    for name in class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (name, row) in class_names.iter().zip(cm.counts()) {
        out.push_str(name);
        for c in row {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}

fn print_report(report: &EvalReport, class_names: &[String]) {
    println!("accuracy     {:.4}", report.accuracy);
    println!("weighted F1  {:.4}", report.weighted_f1);
    for (name, f1) in class_names.iter().zip(&report.per_class_f1) {
        println!("  F1 {name:<12} {f1:.4}");
    }
    let a = &report.angles;
    println!(
        "theta std {:.2} deg, mean cos theta {:.4}, mean cos phi {:.4}, CSR satisfaction {:.4}",
        a.theta_std, a.cos_theta_mean, a.cos_phi_mean, a.csr_satisfaction
    );
}

pub fn eval_cmd(args: &EvalArgs) -> Result<(), CliError> {
    let (params, config, set) = load_scoring_inputs(args)?;
    let report = evaluate(&params, &set, &config)?;
    let staging = Staging::new(&args.out)?;
    staging.write("eval.json", pretty(&report))?;
    staging.write("confusion.csv", confusion_csv(&report.confusion, set.class_names()))?;
    staging.write(RESOLVED_CONFIG, pretty(&config))?;
    finish(staging)?;
    print_report(&report, set.class_names());
    Ok(())
}

pub fn angles_cmd(args: &EvalArgs) -> Result<(), CliError> {
    let (params, config, set) = load_scoring_inputs(args)?;
    let report = angle_report(&params, &set)?;
    let staging = Staging::new(&args.out)?;
    staging.write("angles.csv", report.angles_csv())?;
    staging.write("projection.csv", report.projection_csv())?;
    staging.write(RESOLVED_CONFIG, pretty(&config))?;
    finish(staging)?;
    println!(
        "{} angle rows ({} degenerate), explained variance {:.4} / {:.4}",
        report.rows.len(),
        report.degenerate_rows(),
        report.explained_variance[0],
        report.explained_variance[1]
    );
    Ok(())
}

/// `AOFL_THREADS` when set, otherwise every available core.
fn ablation_threads() -> Result<usize, CliError> {
    match std::env::var("AOFL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("AOFL_THREADS = `{v}` is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn ablate_cmd(args: &AblateArgs) -> Result<(), CliError> {
    let config = args.config.resolve(None)?;
    if args.seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    let threads = ablation_threads()?;
    let variants: Vec<Variant> = if args.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.variants.clone()
    };
    let (set, splits) = load_splits(&args.data, config.seed)?;
    let dims = config.model_dims(set.dim(), set.num_classes())?;
    let resolved = config.resolved(&dims);
    if splits[2].is_empty() {
        return Err(CliError::Usage("the test part of the split is empty".into()));
    }
    println!(
        "{} variants x {} seeds on {threads} thread(s)",
        variants.len(),
        args.seeds.len()
    );
    let report = run_ablation(&resolved, &variants, &args.seeds, &splits, threads);
    let table = report.text_table();
    let staging = Staging::new(&args.out)?;
    staging.write("ablation.csv", report.csv())?;
    staging.write("ablation_runs.csv", report.runs_csv())?;
    staging.write("ablation.txt", &table)?;
    staging.write(RESOLVED_CONFIG, pretty(&resolved))?;
    finish(staging)?;
    print!("{table}");
    Ok(())
}

pub fn inspect_cmd(args: &InspectArgs) -> Result<(), CliError> {
    let params = load_checkpoint(&args.checkpoint)?;
    let dims = params.dims;
    println!("checkpoint   {}", args.checkpoint.display());
    println!("d            {}", dims.d);
    println!("layers       {}", dims.layers);
    println!("heads        {}", dims.heads);
    println!("d_ff         {}", dims.d_ff);
    println!("d_c          {}", dims.d_c);
    println!("num_classes  {}", dims.num_classes);
    println!("parameters   {}", params.param_count());
    println!("tensors      {}", params.leaves().len());
    if !params.is_finite() {
        return Err(CliError::Numerical(format!(
            "checkpoint {} holds non-finite values",
            args.checkpoint.display()
        )));
    }
    Ok(())
}
