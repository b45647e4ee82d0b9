//! The six harness commands. Each owns its output directory and returns
//! what it wrote so callers (the binary, tests) can inspect results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use isp_core::ledger::BudgetLedger;
use isp_core::prune::{
    imp_run, isp_run, kept_for_sparsity, magnitude_prune_count, oneshot_run, progressive_prune_run,
    random_prune_count, required_calls, snip_prune_count, Criterion, ImpConfig, PruneOutcome,
};
use isp_core::rng::stream;
use isp_core::soup::{ims_run, uniform_soup};
use isp_core::train::{evaluate, pretrain};
use isp_core::{Checkpoint, DataCursor, Dataset, Mask};

use crate::config::{ExperimentConfig, Method, SweepAxis};
use crate::error::HarnessError;
use crate::record::{
    create_dir, read_trace, trace_flops, write, write_ledger, write_record, write_trace,
    CallSummary, RunRecord, RECORD_SCHEMA,
};

/// Loads the configured checkpoint or pretrains one deterministically.
pub fn pretrained(cfg: &ExperimentConfig, data: &Dataset) -> Result<Checkpoint, HarnessError> {
    match &cfg.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model.spec() != &cfg.model_spec() {
                return Err(HarnessError::Config(format!(
                    "`checkpoint`: {} does not match the configured model",
                    path.display()
                )));
            }
            Ok(ck)
        }
        None => Ok(pretrain(
            cfg.model_spec(),
            data,
            &cfg.pretrain_config(),
            &mut BudgetLedger::unlimited(),
        )?),
    }
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, HarnessError> {
    create_dir(out)?;
    let data = cfg.dataset()?;
    let mut ledger = BudgetLedger::unlimited();
    let ck = pretrain(cfg.model_spec(), &data, &cfg.pretrain_config(), &mut ledger)?;
    let path = out.join("pretrained.ckpt");
    ck.save(&path)?;
    write(&out.join("dataset.bin"), data.to_bytes())?;
    write_trace(&out.join("trace.jsonl"), &ledger)?;
    write_ledger(&out.join("ledger.json"), &ledger)?;
    let full = Mask::ones(&ck.model.registry());
    let val = ck.metric("val_accuracy").unwrap_or(0.0);
    let test = if data.splits.test.is_empty() {
        0.0
    } else {
        evaluate(&ck.model, &data, &data.splits.test)?.accuracy
    };
    let record = RunRecord {
        schema: RECORD_SCHEMA.into(),
        command: "pretrain".into(),
        method: "dense".into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        spec: cfg.model_spec(),
        batch_size: cfg.batch_size,
        budget: ledger.total_steps(),
        final_test_accuracy: test,
        final_val_accuracy: val,
        final_sparsity: 0.0,
        kept: full.kept(),
        total: full.total(),
        ledger: ledger.summary(),
        budget_ratio: 1.0,
        calls: Vec::new(),
        artifacts: [
            "pretrained.ckpt",
            "dataset.bin",
            "trace.jsonl",
            "ledger.json",
            "summary.csv",
        ]
        .map(String::from)
        .to_vec(),
    };
    write_record(out, &record)?;
    Ok(path)
}

/// Dispatches one pruning method under the shared budget convention.
pub fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    pre: &Checkpoint,
    data: &Dataset,
    ledger: &mut BudgetLedger,
) -> Result<PruneOutcome, HarnessError> {
    let settings = cfg.run_settings();
    let total = cfg.total_steps(data);
    let target = cfg.target_sparsity;
    let out = match method {
        Method::Isp => isp_run(
            pre,
            None,
            &cfg.schedule(data),
            &cfg.denoiser(),
            &settings,
            data,
            ledger,
        )?,
        Method::Imp => imp_run(pre, &cfg.imp(data, false), &settings, data, ledger)?,
        Method::ImpRewind => imp_run(pre, &cfg.imp(data, true), &settings, data, ledger)?,
        Method::Oneshot => oneshot_run(
            pre,
            Criterion::Magnitude,
            target,
            total,
            &settings,
            data,
            ledger,
        )?,
        Method::Random => oneshot_run(
            pre,
            Criterion::Random,
            target,
            total,
            &settings,
            data,
            ledger,
        )?,
        Method::Snip => oneshot_run(pre, Criterion::Snip, target, total, &settings, data, ledger)?,
        Method::Progressive => {
            progressive_prune_run(pre, &cfg.progressive(data), &settings, data, ledger)?
        }
    };
    Ok(out)
}

fn is_single_pass(method: Method) -> bool {
    !matches!(method, Method::Imp | Method::ImpRewind)
}

pub fn cmd_prune(
    cfg: &ExperimentConfig,
    method: Method,
    out: &Path,
) -> Result<RunRecord, HarnessError> {
    let data = cfg.dataset()?;
    let pre = pretrained(cfg, &data)?;
    let total = cfg.total_steps(&data);
    let mut ledger = if is_single_pass(method) {
        BudgetLedger::with_limit(total)
    } else {
        BudgetLedger::unlimited()
    };
    let outcome = run_method(cfg, method, &pre, &data, &mut ledger)?;
    if is_single_pass(method) && ledger.total_steps() > total {
        return Err(HarnessError::Budget(isp_core::Error::BudgetExceeded {
            requested: ledger.total_steps(),
            remaining: total,
        }));
    }
    create_dir(&out.join("masks"))?;
    let mut calls = Vec::with_capacity(outcome.calls.len());
    let mut artifacts = Vec::new();
    for c in &outcome.calls {
        let name = format!("masks/call-{:03}.mask", c.index);
        write(&out.join(&name), c.mask.to_bytes())?;
        calls.push(CallSummary {
            index: c.index,
            step: c.step,
            target_kept: c.target_kept,
            kept: c.kept,
            sparsity: c.sparsity,
            mask: name.clone(),
        });
        artifacts.push(name);
    }
    write(&out.join("final.mask"), outcome.mask.to_bytes())?;
    outcome.checkpoint.save(&out.join("final.ckpt"))?;
    write_trace(&out.join("trace.jsonl"), &ledger)?;
    write_ledger(&out.join("ledger.json"), &ledger)?;
    artifacts.extend(
        [
            "final.mask",
            "final.ckpt",
            "trace.jsonl",
            "ledger.json",
            "summary.csv",
        ]
        .map(String::from),
    );
    let record = RunRecord {
        schema: RECORD_SCHEMA.into(),
        command: "prune".into(),
        method: method.as_str().into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        spec: cfg.model_spec(),
        batch_size: cfg.batch_size,
        budget: total,
        final_test_accuracy: outcome.test.accuracy,
        final_val_accuracy: outcome.val.accuracy,
        final_sparsity: outcome.mask.sparsity(),
        kept: outcome.mask.kept(),
        total: outcome.mask.total(),
        ledger: ledger.summary(),
        budget_ratio: if total == 0 {
            0.0
        } else {
            ledger.total_steps() as f64 / total as f64
        },
        calls,
        artifacts,
    };
    write_record(out, &record)?;
    Ok(record)
}

pub fn cmd_ims(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord, HarnessError> {
    create_dir(out)?;
    let data = cfg.dataset()?;
    let pre = pretrained(cfg, &data)?;
    let mut ledger = BudgetLedger::unlimited();
    let soup = ims_run(&pre, &cfg.soup(), &data, &mut ledger)?;
    let mut log = String::from("schema,k,sparsity,alpha,val_before,val_after\n");
    for r in &soup.log {
        let _ = writeln!(
            log,
            "isp-soup/1,{},{},{},{},{}",
            r.k, r.sparsity, r.alpha, r.val_before, r.val_after
        );
    }
    write(&out.join("soup_log.csv"), log)?;
    soup.checkpoint.save(&out.join("soup.ckpt"))?;
    let uniform = uniform_soup(&soup.candidates)?;
    let uniform_test = evaluate(&uniform, &data, &data.splits.test)?;
    write(
        &out.join("uniform_soup.csv"),
        format!(
            "schema,test_accuracy\nisp-uniform-soup/1,{}\n",
            uniform_test.accuracy
        ),
    )?;
    write_trace(&out.join("trace.jsonl"), &ledger)?;
    write_ledger(&out.join("ledger.json"), &ledger)?;
    let test = evaluate(&soup.checkpoint.model, &data, &data.splits.test)?;
    let full = Mask::ones(&pre.model.registry());
    let record = RunRecord {
        schema: RECORD_SCHEMA.into(),
        command: "ims".into(),
        method: "ims".into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        spec: cfg.model_spec(),
        batch_size: cfg.batch_size,
        budget: cfg.soup_count as u64 * cfg.soup_steps,
        final_test_accuracy: test.accuracy,
        final_val_accuracy: soup.val_final.accuracy,
        final_sparsity: 0.0,
        kept: full.kept(),
        total: full.total(),
        ledger: ledger.summary(),
        budget_ratio: 1.0,
        calls: Vec::new(),
        artifacts: [
            "soup_log.csv",
            "soup.ckpt",
            "uniform_soup.csv",
            "trace.jsonl",
            "ledger.json",
            "summary.csv",
        ]
        .map(String::from)
        .to_vec(),
    };
    write_record(out, &record)?;
    Ok(record)
}

/// Mask produced by `method` at `target` sparsity from the pretrained
/// weights. IMP masks use `compare_round_steps` per round and as many
/// rounds as the rate needs.
pub fn method_mask(
    cfg: &ExperimentConfig,
    method: Method,
    pre: &Checkpoint,
    data: &Dataset,
    target: f64,
    slot: u64,
) -> Result<Mask, HarnessError> {
    let full = Mask::ones(&pre.model.registry());
    let kept = kept_for_sparsity(full.total(), target)?;
    let remove = full.kept() - kept;
    let mut local = cfg.clone();
    local.target_sparsity = target;
    let mut ledger = BudgetLedger::unlimited();
    let mask = match method {
        Method::Oneshot => magnitude_prune_count(&pre.model, &full, remove)?,
        Method::Random => random_prune_count(
            &full,
            remove,
            &mut stream(cfg.seed, "compare-random", &[slot]),
        )?,
        Method::Snip => {
            let mut cursor = DataCursor::new(
                data.splits.train.clone(),
                cfg.batch_size,
                stream(cfg.seed, "snip-batch", &[]),
            )?;
            let batch = data.batch(&cursor.next_batch());
            snip_prune_count(&pre.model, &full, remove, &batch)?
        }
        Method::Imp | Method::ImpRewind => {
            let rounds = required_calls(full.total(), cfg.compression_rate, kept)?
                .ok_or_else(|| {
                    HarnessError::Config("`compression_rate`: too small to reach target".into())
                })?
                .max(1);
            let imp = ImpConfig {
                rounds,
                per_round_budget: cfg.compare_round_steps,
                rate: cfg.compression_rate,
                target,
                rewind: local.imp(data, method == Method::ImpRewind).rewind,
            };
            imp_run(pre, &imp, &cfg.run_settings(), data, &mut ledger)?.mask
        }
        Method::Isp | Method::Progressive => {
            run_method(&local, method, pre, data, &mut ledger)?.mask
        }
    };
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub sparsity: f64,
    pub a: String,
    pub b: String,
    pub keep_cosine: f64,
    pub prune_cosine: f64,
}

pub fn cmd_mask_compare(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<CompareRow>, HarnessError> {
    create_dir(out)?;
    let data = cfg.dataset()?;
    let pre = pretrained(cfg, &data)?;
    let methods: Vec<Method> = cfg
        .compare_methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (si, &s) in cfg.compare_sparsities.iter().enumerate() {
        let masks: Vec<Mask> = methods
            .iter()
            .map(|&m| method_mask(cfg, m, &pre, &data, s, si as u64))
            .collect::<Result<_, _>>()?;
        for i in 0..methods.len() {
            for j in i..methods.len() {
                rows.push(CompareRow {
                    sparsity: s,
                    a: methods[i].as_str().into(),
                    b: methods[j].as_str().into(),
                    keep_cosine: masks[i].cosine_similarity(&masks[j])?,
                    prune_cosine: masks[i].prune_cosine_similarity(&masks[j])?,
                });
            }
        }
    }
    let mut csv = String::from("schema,sparsity,method_a,method_b,keep_cosine,prune_cosine\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "isp-mask-compare/1,{},{},{},{},{}",
            r.sparsity, r.a, r.b, r.keep_cosine, r.prune_cosine
        );
    }
    write(&out.join("mask_compare.csv"), csv)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: u64,
    pub status: String,
    pub record: Option<RunRecord>,
}

/// Runs ISP once per value of `axis`. A value whose schedule does not fit
/// the budget yields a status row instead of aborting the sweep.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[u64],
    out: &Path,
) -> Result<Vec<SweepRow>, HarnessError> {
    create_dir(out)?;
    let name = match axis {
        SweepAxis::DenoiserCount => "denoiser_count",
        SweepAxis::LookAhead => "look_ahead",
    };
    let mut rows = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        match axis {
            SweepAxis::DenoiserCount => c.denoiser_count = v as usize,
            SweepAxis::LookAhead => c.look_ahead = v,
        }
        let row = match cmd_prune(&c, Method::Isp, &out.join(format!("{name}-{v}"))) {
            Ok(r) => SweepRow {
                value: v,
                status: "ok".into(),
                record: Some(r),
            },
            Err(HarnessError::Budget(e)) => SweepRow {
                value: v,
                status: format!("budget-exceeded: {e}"),
                record: None,
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    let mut csv = String::from(
        "schema,axis,value,status,test_accuracy,sparsity,total_steps,total_flops,config_hash\n",
    );
    for r in &rows {
        match &r.record {
            Some(rec) => {
                let _ = writeln!(
                    csv,
                    "isp-sweep/1,{name},{},ok,{},{},{},{},{}",
                    r.value,
                    rec.final_test_accuracy,
                    rec.final_sparsity,
                    rec.ledger.total_steps,
                    rec.ledger.total_flops,
                    rec.config_hash
                );
            }
            None => {
                let _ = writeln!(csv, "isp-sweep/1,{name},{},budget-exceeded,,,,,", r.value);
            }
        }
    }
    write(&out.join("sweep.csv"), csv)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub config_hash: String,
    pub method: String,
    pub ledger_flops: u64,
    pub trace_flops: u64,
}

pub const REPORT_HEADER: &str =
    "schema,config_hash,method,seed,test_accuracy,sparsity,total_steps,ledger_flops,trace_flops,flops_match";

/// Summarizes run directories and recomputes each run's FLOPs from its
/// step trace.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>, HarnessError> {
    create_dir(out)?;
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    let mut plot = String::from("schema,method,sparsity,test_accuracy,total_flops\n");
    let mut rows = Vec::new();
    for dir in run_dirs {
        let rec = RunRecord::load(dir)?;
        let trace = read_trace(&dir.join("trace.jsonl"))?;
        let recomputed = trace_flops(&rec.spec, &trace);
        let _ = writeln!(
            csv,
            "isp-report/1,{},{},{},{},{},{},{},{},{}",
            rec.config_hash,
            rec.method,
            rec.seed,
            rec.final_test_accuracy,
            rec.final_sparsity,
            rec.ledger.total_steps,
            rec.ledger.total_flops,
            recomputed,
            recomputed == rec.ledger.total_flops
        );
        let _ = writeln!(
            plot,
            "isp-plot/1,{},{},{},{}",
            rec.method, rec.final_sparsity, rec.final_test_accuracy, rec.ledger.total_flops
        );
        rows.push(ReportRow {
            config_hash: rec.config_hash,
            method: rec.method,
            ledger_flops: rec.ledger.total_flops,
            trace_flops: recomputed,
        });
    }
    write(&out.join("report.csv"), csv)?;
    write(&out.join("accuracy_vs_sparsity.csv"), plot)?;
    Ok(rows)
}
