//! Two-stage training on a synthetic grounding task.
//!
//! Stage one aligns the visual side (compressor and projector) with the
//! language model held fixed; stage two trains everything behind the encoder.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embq::QueryInit;
use crate::error::{Error, Result};
use crate::model::{MixedSequence, Model, ParamGroup, Turn, VisualInput};
use crate::tensor::{Tape, Tensor, Var};
use crate::vision::{detokenize, toy_tokenize, VisualGrid, END_OF_ANSWER};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which parameter groups receive updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: BTreeMap<ParamGroup, bool>,
}

impl FreezeMask {
    pub fn new(trainable: &[ParamGroup]) -> Self {
        FreezeMask {
            trainable: ParamGroup::ALL
                .into_iter()
                .map(|g| (g, trainable.contains(&g)))
                .collect(),
        }
    }

    /// Compressor and projector only.
    pub fn stage1() -> Self {
        Self::new(&[ParamGroup::Compressor, ParamGroup::Projector])
    }

    /// Everything; query embeddings stay fixed under `fixed_dot`.
    pub fn stage2(query_init: QueryInit) -> Self {
        let mut m = Self::new(&ParamGroup::ALL);
        m.trainable
            .insert(ParamGroup::Queries, query_init.trainable());
        m
    }

    pub fn group(&self, g: ParamGroup) -> bool {
        self.trainable[&g]
    }

    pub fn trainable(&self, name: &str) -> bool {
        ParamGroup::of(name).is_some_and(|g| self.group(g))
    }
}

/// Instruction asking for the quadrant with the largest mean of channel 0.
pub const ASK_BRIGHTEST: &str = "where is it brightest?";
/// Instruction asking for the quadrant with the smallest mean of channel 0.
pub const ASK_DARKEST: &str = "where is it darkest?";
pub const QUADRANTS: [&str; 4] = ["tl", "tr", "bl", "br"];

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub grid_seed: u64,
    pub instruction: String,
    pub answer: String,
}

impl Example {
    pub fn visual(&self, model: &Model) -> Result<VisualInput> {
        VisualInput::synth(model.config(), self.grid_seed)
    }

    /// Instruction as text, answer followed by the end-of-answer id.
    pub fn turn(&self, vocab: usize) -> Result<Turn> {
        let mut answer = toy_tokenize(&self.answer, vocab)?;
        answer.push(END_OF_ANSWER);
        Ok(Turn::new(toy_tokenize(&self.instruction, vocab)?, answer))
    }

    /// The prompt without its answer.
    pub fn prompt(&self, model: &Model) -> Result<MixedSequence> {
        let text = toy_tokenize(&self.instruction, model.config().vocab_size)?;
        Ok(model.sequence(&[Turn::new(text, vec![])]))
    }
}

/// Quadrant means of channel 0, in `tl, tr, bl, br` order. A cell is in the
/// top half when `2·r < h` and in the left half when `2·c < w`.
pub fn quadrant_means(grid: &VisualGrid) -> [f64; 4] {
    let mut sums = [0.0; 4];
    let mut counts = [0.0; 4];
    for r in 0..grid.h() {
        for c in 0..grid.w() {
            let q = usize::from(2 * r >= grid.h()) * 2 + usize::from(2 * c >= grid.w());
            sums[q] += grid.cell(r, c)[0];
            counts[q] += 1.0;
        }
    }
    std::array::from_fn(|q| sums[q] / counts[q])
}

/// Ground-truth answer for `instruction` on `visual` (the last grid, which
/// is the thumbnail in HD mode).
pub fn answer_for(visual: &VisualInput, instruction: &str) -> Result<&'static str> {
    let grid = visual
        .grids
        .last()
        .ok_or_else(|| Error::contract("visual input without grids"))?;
    let means = quadrant_means(grid);
    let pick = |better: fn(f64, f64) -> bool| {
        (1..4).fold(0, |best, q| {
            if better(means[q], means[best]) {
                q
            } else {
                best
            }
        })
    };
    let q = match instruction {
        ASK_BRIGHTEST => pick(|a, b| a > b),
        ASK_DARKEST => pick(|a, b| a < b),
        other => return Err(Error::contract(format!("unknown instruction {other:?}"))),
    };
    Ok(QUADRANTS[q])
}

/// Deterministic grounding examples: answers depend on the image, so the
/// loss cannot be driven down while ignoring the visual tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub examples: Vec<Example>,
}

impl ToyDataset {
    pub fn generate(model: &Model, n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = (0..n)
            .map(|_| {
                let grid_seed: u64 = rng.random();
                let instruction = if rng.random_bool(0.5) {
                    ASK_BRIGHTEST
                } else {
                    ASK_DARKEST
                };
                let visual = VisualInput::synth(model.config(), grid_seed)?;
                Ok(Example {
                    grid_seed,
                    instruction: instruction.to_string(),
                    answer: answer_for(&visual, instruction)?.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ToyDataset { examples })
    }

    /// A disjoint evaluation split drawn from a derived seed.
    pub fn held_out(model: &Model, n: usize, seed: u64) -> Result<Self> {
        Self::generate(model, n, seed ^ 0x005E_ED0F_E7A1)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (name, g) in grads {
            let p = model.params_mut().get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Mean next-token cross-entropy over the answer positions of `seq`.
pub fn loss(logits: &Tensor, seq: &MixedSequence) -> Result<f64> {
    let targets = seq.answer_targets();
    if targets.is_empty() {
        return Err(Error::contract("loss needs a non-empty answer segment"));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.cross_entropy(l, targets)?;
    Ok(tape.value(ce).data()[0])
}

/// Records the batch loss (mean over examples of [`loss`]) on `tape`.
pub fn batch_loss_graph(
    model: &Model,
    tape: &mut Tape,
    bound: &crate::model::BoundParams,
    examples: &[Example],
) -> Result<Var> {
    if examples.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    let vocab = model.config().vocab_size;
    let mut total: Option<Var> = None;
    for ex in examples {
        let seq = model.sequence(&[ex.turn(vocab)?]);
        let visual = ex.visual(model)?;
        let out = model.build_graph(tape, bound, &visual, &seq, true)?;
        let targets = seq.answer_targets();
        if targets.is_empty() {
            return Err(Error::contract("loss needs a non-empty answer segment"));
        }
        let l = tape.cross_entropy(out.logits, targets)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), 1.0 / examples.len() as f64))
}

/// Batch loss and the gradients of every parameter `mask` leaves trainable.
pub fn loss_and_grads(
    model: &Model,
    examples: &[Example],
    mask: &FreezeMask,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, |n| mask.trainable(n));
    let l = batch_loss_graph(model, &mut tape, &bound, examples)?;
    let grads = tape.backward(l)?;
    let by_name = bound
        .iter()
        .filter(|(n, _)| mask.trainable(n))
        .map(|(n, v)| (n.to_string(), grads.get_or_zero(v)))
        .collect();
    Ok((tape.value(l).data()[0], by_name))
}

/// Full-batch Adam steps; returns the loss measured before each step.
pub fn train_stage(
    model: &mut Model,
    dataset: &ToyDataset,
    mask: &FreezeMask,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    train_stage_with(model, dataset, mask, steps, lr, |_, _| {})
}

/// [`train_stage`] with a callback invoked as `(step, loss)` after every step.
pub fn train_stage_with(
    model: &mut Model,
    dataset: &ToyDataset,
    mask: &FreezeMask,
    steps: usize,
    lr: f64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    if steps == 0 {
        return Err(Error::contract("steps must be at least 1"));
    }
    let mut adam = Adam::new(lr);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (l, grads) = loss_and_grads(model, &dataset.examples, mask)?;
        if !l.is_finite() {
            return Err(Error::contract(format!("loss diverged at step {step}")));
        }
        adam.update(model, &grads)?;
        losses.push(l);
        on_step(step, l);
    }
    Ok(losses)
}

/// Central-difference check of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub group: ParamGroup,
    pub entries_checked: usize,
    pub max_rel_error: f64,
}

/// Compares tape gradients of the batch loss with central differences for
/// every parameter tensor `mask` leaves trainable. Tensors larger than
/// `max_entries` are sampled: half the entries with the largest analytic
/// gradient, half on an even stride.
pub fn gradient_check(
    model: &Model,
    examples: &[Example],
    mask: &FreezeMask,
    max_entries: usize,
) -> Result<Vec<GradCheck>> {
    let (_, grads) = loss_and_grads(model, examples, mask)?;
    let loss_of = |m: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape, |_| false);
        let l = batch_loss_graph(m, &mut tape, &bound, examples)?;
        Ok(tape.value(l).data()[0])
    };
    let h = crate::tensor::FD_STEP;
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(grads.len());
    for (name, g) in &grads {
        let n = g.numel();
        let mut idx: Vec<usize> = (0..n).collect();
        if n > max_entries.max(2) {
            let half = max_entries / 2;
            idx.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()));
            let mut pick: Vec<usize> = idx[..half].to_vec();
            pick.extend((0..max_entries - half).map(|k| k * n / (max_entries - half)));
            pick.sort_unstable();
            pick.dedup();
            idx = pick;
        }
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let orig = probe.params().get(name)?.data()[i];
            probe.params_mut().get_mut(name)?.data_mut()[i] = orig + h;
            let up = loss_of(&probe)?;
            probe.params_mut().get_mut(name)?.data_mut()[i] = orig - h;
            let down = loss_of(&probe)?;
            probe.params_mut().get_mut(name)?.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(crate::tensor::relative_error(g.data()[i], fd));
        }
        out.push(GradCheck {
            name: name.clone(),
            group: ParamGroup::of(name).expect("named parameters belong to a group"),
            entries_checked: idx.len(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}

/// Fraction of examples whose greedy answer matches exactly.
pub fn evaluate(model: &Model, dataset: &ToyDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    let mut correct = 0usize;
    for ex in &dataset.examples {
        let prompt = ex.prompt(model)?;
        let out = model.decode_greedy(&ex.visual(model)?, &prompt, ex.answer.len() + 1)?;
        correct += usize::from(detokenize(&out) == ex.answer);
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_sequence, ModelConfig};

    #[test]
    fn masks() {
        let s1 = FreezeMask::stage1();
        assert!(s1.trainable("compressor.w1") && s1.trainable("proj.w"));
        assert!(!s1.trainable("llm.embed") && !s1.trainable("queries"));
        assert!(!s1.trainable("embq.L01.B0.up_proj"));
        assert!(FreezeMask::stage2(QueryInit::Dot).trainable("queries"));
        assert!(!FreezeMask::stage2(QueryInit::FixedDot).trainable("queries"));
        assert!(FreezeMask::stage2(QueryInit::FixedDot).trainable("llm.embed"));
    }

    #[test]
    fn loss_examples() {
        let seq = build_sequence(0, &[Turn::new(vec![1], vec![2, 3])], 0);
        let uniform = Tensor::zeros(&[3, 258]);
        assert!((loss(&uniform, &seq).unwrap() - 258f64.ln()).abs() < 1e-12);

        let mut sharp = Tensor::zeros(&[3, 258]);
        sharp.data_mut()[2] = 800.0;
        sharp.data_mut()[258 + 3] = 800.0;
        assert!(loss(&sharp, &seq).unwrap() < 1e-300);

        let mut logits = Tensor::zeros(&[3, 4]);
        logits.data_mut()[..4].copy_from_slice(&[1.0, 2.0, 0.5, -1.0]);
        logits.data_mut()[4..8].copy_from_slice(&[0.0, 0.0, 3.0, 1.0]);
        let seq = build_sequence(0, &[Turn::new(vec![0], vec![2, 3])], 0);
        let lse = |r: &[f64]| r.iter().map(|x| x.exp()).sum::<f64>().ln();
        let want = ((lse(&[1.0, 2.0, 0.5, -1.0]) - 0.5) + (lse(&[0.0, 0.0, 3.0, 1.0]) - 1.0)) / 2.0;
        assert!((loss(&logits, &seq).unwrap() - want).abs() < 1e-12);

        let no_answer = build_sequence(0, &[Turn::new(vec![1], vec![])], 0);
        assert!(loss(&uniform, &no_answer).is_err());
    }

    #[test]
    fn dataset_is_reproducible_and_grounded() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let a = ToyDataset::generate(&m, 16, 3).unwrap();
        assert_eq!(a, ToyDataset::generate(&m, 16, 3).unwrap());
        assert_ne!(a, ToyDataset::held_out(&m, 16, 3).unwrap());
        for ex in &a.examples {
            let v = ex.visual(&m).unwrap();
            assert_eq!(answer_for(&v, &ex.instruction).unwrap(), ex.answer);
        }
        let answers: std::collections::BTreeSet<_> = a.examples.iter().map(|e| &e.answer).collect();
        assert!(answers.len() > 1);
    }

    #[test]
    fn quadrant_means_of_hand_grid() {
        let g = VisualGrid::from_cells(&[vec![vec![1.0], vec![2.0]], vec![vec![3.0], vec![4.0]]])
            .unwrap();
        assert_eq!(quadrant_means(&g), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let mut m = Model::new(ModelConfig::tiny()).unwrap();
        let empty = ToyDataset { examples: vec![] };
        assert!(train_stage(&mut m, &empty, &FreezeMask::stage1(), 1, 1e-3).is_err());
        let data = ToyDataset::generate(&m, 2, 0).unwrap();
        assert!(train_stage(&mut m, &data, &FreezeMask::stage1(), 0, 1e-3).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let mut m = Model::new(ModelConfig::tiny()).unwrap();
        let data = ToyDataset::generate(&m, 2, 0).unwrap();
        let losses =
            train_stage(&mut m, &data, &FreezeMask::stage2(QueryInit::Dot), 3, 0.0).unwrap();
        assert!(losses.iter().all(|&l| l == losses[0]));
    }
}
