use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use sloth_core::cost::{self, ArchSpec, Phase, TokenPolicy};
use sloth_core::model::{save_checkpoint, ParamGroup, Segment, Turn};
use sloth_core::tensor::GRAD_TOL;
use sloth_core::trainer::{
    answer_for, batch_loss_graph, evaluate, gradient_check, train_stage_with, FreezeMask,
    ToyDataset, ASK_BRIGHTEST, ASK_DARKEST,
};
use sloth_core::vision::{detokenize, toy_tokenize};
use sloth_core::{Model, Tape, VisualInput};

use crate::{CliError, RunConfig};

/// Answer tokens decoded by the demo; the toy answers are two bytes plus
/// the end marker.
const DEMO_MAX_NEW: usize = 8;

pub fn demo(config: &RunConfig, hd: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let mut config = config.clone();
    config.model.hd |= hd;
    let model = Model::new(config.checked_model_config()?)?;
    let c = model.config();
    let seed = c.seed;
    let instruction = if seed % 2 == 0 {
        ASK_BRIGHTEST
    } else {
        ASK_DARKEST
    };
    let visual = VisualInput::synth(c, seed)?;
    let prompt = model.sequence(&[Turn::new(toy_tokenize(instruction, c.vocab_size)?, vec![])]);
    let (n_vis, n_q) = (prompt.count(Segment::Visual), prompt.count(Segment::Query));
    writeln!(
        out,
        "visual={n_vis} queries={n_q} total_visual_side={}",
        n_vis + n_q
    )?;
    writeln!(
        out,
        "text={} prompt_len={}",
        prompt.count(Segment::Text),
        prompt.len()
    )?;
    writeln!(out, "instruction={instruction:?}")?;
    writeln!(out, "expected={:?}", answer_for(&visual, instruction)?)?;
    let answer = model.decode_greedy(&visual, &prompt, DEMO_MAX_NEW)?;
    writeln!(
        out,
        "answer={:?} tokens={}",
        detokenize(&answer),
        answer.len()
    )?;
    let spec = ArchSpec {
        name: "toy".into(),
        param_count: model.params().numel() as u64,
        n_layers: c.n_layers as u64,
        d_model: c.d_model as u64,
        d_ff: c.d_ff as u64,
        n_heads: c.n_heads as u64,
        policy: TokenPolicy::Fixed(c.n_visual_tokens()),
        n_queries: c.n_queries,
        embq: None,
    };
    writeln!(
        out,
        "params={} prefill_flops={}",
        spec.param_count,
        cost::estimate_flops(&spec, prompt.len() as u64, Phase::Prefill)
    )?;
    Ok(())
}

pub fn cost_table(config: &RunConfig, json: bool) -> Result<String, CliError> {
    let rows = cost::compare(&ArchSpec::presets(), &config.scenario())?;
    Ok(if json {
        cost::to_json(&rows) + "\n"
    } else {
        cost::to_csv(&rows)
    })
}

pub fn gradcheck(config: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let model = Model::new(config.checked_model_config()?)?;
    let data = ToyDataset::generate(&model, config.train.grad_examples, config.model.seed)?;
    let mask = FreezeMask::stage2(config.embq.query_init);
    let report = gradient_check(&model, &data.examples, &mask, config.train.grad_entries)?;
    let mut groups: BTreeMap<ParamGroup, (usize, usize, f64)> = BTreeMap::new();
    for r in &report {
        let g = groups.entry(r.group).or_default();
        g.0 += 1;
        g.1 += r.entries_checked;
        g.2 = g.2.max(r.max_rel_error);
    }
    for (g, (tensors, entries, err)) in &groups {
        writeln!(
            out,
            "group={} tensors={tensors} entries={entries} max_rel_error={err:.3e}",
            g.prefix()
        )?;
    }
    let worst = report.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let ok = worst <= GRAD_TOL;
    writeln!(
        out,
        "max_rel_error={worst:.3e} tolerance={GRAD_TOL:.0e} {}",
        if ok { "PASS" } else { "FAIL" }
    )?;
    if ok {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient error {worst:.3e} exceeds {GRAD_TOL:.0e}"
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
    pub final_loss: f64,
    pub eval_accuracy: f64,
}

/// Mean answer loss of `model` on `data` without recording gradients.
pub fn dataset_loss(model: &Model, data: &ToyDataset) -> Result<f64, CliError> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, |_| false);
    let l = batch_loss_graph(model, &mut tape, &bound, &data.examples)?;
    Ok(tape.value(l).data()[0])
}

/// Stage 1 (compressor and projector) then stage 2 (everything), both on
/// the training split; accuracy is measured on the held-out split.
/// `on_step` receives `(stage, step, loss)`.
pub fn train_two_stage(
    model: &mut Model,
    config: &RunConfig,
    mut on_step: impl FnMut(u8, usize, f64),
) -> Result<TrainOutcome, CliError> {
    let t = &config.train;
    let seed = config.model.seed;
    let train = ToyDataset::generate(model, t.n_train, seed)?;
    let held_out = ToyDataset::held_out(model, t.n_eval, seed)?;
    let mut run = |model: &mut Model, mask: FreezeMask, steps: usize, lr: f64, stage: u8| {
        if steps == 0 {
            return Ok(Vec::new());
        }
        train_stage_with(model, &train, &mask, steps, lr, |s, l| on_step(stage, s, l))
    };
    let stage1 = run(model, FreezeMask::stage1(), t.stage1_steps, t.stage1_lr, 1)?;
    let stage2 = run(
        model,
        FreezeMask::stage2(config.embq.query_init),
        t.stage2_steps,
        t.stage2_lr,
        2,
    )?;
    Ok(TrainOutcome {
        stage1,
        stage2,
        final_loss: dataset_loss(model, &train)?,
        eval_accuracy: evaluate(model, &held_out)?,
    })
}

/// SHA-256 over the little-endian bytes of every tensor in each group,
/// in name order.
pub fn group_checksums(model: &Model) -> BTreeMap<ParamGroup, String> {
    let mut hashers: BTreeMap<ParamGroup, Sha256> = BTreeMap::new();
    for (name, t) in model.params().iter() {
        let Some(g) = ParamGroup::of(name) else {
            continue;
        };
        let h = hashers.entry(g).or_default();
        h.update(name.as_bytes());
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hashers
        .into_iter()
        .map(|(g, h)| (g, format!("{:x}", h.finalize())))
        .collect()
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l:.9}\n"));
    }
    s
}

fn report_checksums(
    out: &mut dyn Write,
    stage: &str,
    before: &BTreeMap<ParamGroup, String>,
    after: &BTreeMap<ParamGroup, String>,
) -> std::io::Result<()> {
    for (g, b) in before {
        let a = &after[g];
        let state = if a == b { "unchanged" } else { "changed" };
        writeln!(out, "{stage} {} {state} before={b} after={a}", g.prefix())?;
    }
    Ok(())
}

pub fn train(config: &RunConfig, dir: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let mut model = Model::new(config.checked_model_config()?)?;
    let initial = group_checksums(&model);

    // Run the stages separately so the frozen groups can be audited in between.
    let stage1_only = RunConfig {
        train: crate::config::TrainSection {
            stage2_steps: 0,
            ..config.train.clone()
        },
        ..config.clone()
    };
    let first = train_two_stage(&mut model, &stage1_only, |_, _, _| {})?;
    let after1 = group_checksums(&model);
    report_checksums(out, "stage1", &initial, &after1)?;
    let mask = FreezeMask::stage1();
    if let Some(g) = ParamGroup::ALL
        .into_iter()
        .find(|&g| !mask.group(g) && initial.get(&g) != after1.get(&g))
    {
        return Err(CliError::Check(format!(
            "stage 1 modified frozen group {}",
            g.prefix()
        )));
    }

    let stage2_only = RunConfig {
        train: crate::config::TrainSection {
            stage1_steps: 0,
            ..config.train.clone()
        },
        ..config.clone()
    };
    let second = train_two_stage(&mut model, &stage2_only, |_, _, _| {})?;
    report_checksums(out, "stage2", &after1, &group_checksums(&model))?;
    writeln!(
        out,
        "final_loss={:.6} eval_accuracy={:.4}",
        second.final_loss, second.eval_accuracy
    )?;

    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("stage1_loss.csv"), loss_csv(&first.stage1))?;
        std::fs::write(dir.join("stage2_loss.csv"), loss_csv(&second.stage2))?;
        save_checkpoint(&model, dir.join("model.slth"))?;
        writeln!(out, "wrote {}", dir.display())?;
    }
    Ok(())
}
