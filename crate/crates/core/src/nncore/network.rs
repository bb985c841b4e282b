//! Executor for the residual-MLP classifier over a named [`ParamSet`].
//!
//! Layout: mean-pooled token embedding, then `num_blocks` residual blocks
//! `h + W2·tanh(W1·h + b1) + b2`, then a linear head. Any block weight may
//! carry a low-rank pair `<weight>.lora_b`, `<weight>.lora_a`, in which case
//! the block uses `W + B·A`.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::layers::{self, linear, linear_backward, tanh, tanh_backward};
use super::{Grads, Matrix, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
}

pub mod names {
    pub const EMBEDDING: &str = "embedding";
    pub const HEAD_WEIGHT: &str = "head.weight";
    pub const HEAD_BIAS: &str = "head.bias";

    pub fn fc1_weight(block: usize) -> String {
        format!("blocks.{block}.fc1.weight")
    }
    pub fn fc1_bias(block: usize) -> String {
        format!("blocks.{block}.fc1.bias")
    }
    pub fn fc2_weight(block: usize) -> String {
        format!("blocks.{block}.fc2.weight")
    }
    pub fn fc2_bias(block: usize) -> String {
        format!("blocks.{block}.fc2.bias")
    }
    pub fn lora_a(target: &str) -> String {
        format!("{target}.lora_a")
    }
    pub fn lora_b(target: &str) -> String {
        format!("{target}.lora_b")
    }
}

/// `w + b·a`
pub fn low_rank_update(w: &Matrix, b: &Matrix, a: &Matrix) -> Result<Matrix> {
    w.add(&b.matmul(a)?)
}

/// One residual block. Returns the block output and the tanh activation.
pub fn residual_block(h: &Matrix, w1: &Matrix, b1: &Matrix, w2: &Matrix, b2: &Matrix) -> Result<(Matrix, Matrix)> {
    let act = tanh(&linear(h, w1, b1)?);
    let mut out = linear(&act, w2, b2)?;
    out.add_assign(h)?;
    Ok((out, act))
}

fn fetch<'a>(params: &'a ParamSet, name: &str) -> Result<&'a Matrix> {
    params
        .get(name)
        .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
}

fn effective_weight<'a>(params: &'a ParamSet, name: &str) -> Result<Cow<'a, Matrix>> {
    let w = fetch(params, name)?;
    match (params.get(&names::lora_b(name)), params.get(&names::lora_a(name))) {
        (Some(b), Some(a)) => Ok(Cow::Owned(low_rank_update(w, b, a)?)),
        (None, None) => Ok(Cow::Borrowed(w)),
        _ => Err(Error::Shape(format!("incomplete low-rank pair on `{name}`"))),
    }
}

fn check_finite(m: &Matrix, layer: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation in `{layer}`")))
    }
}

struct Trace {
    /// Input to each block, then the head input last.
    inputs: Vec<Matrix>,
    acts: Vec<Matrix>,
    logits: Matrix,
}

fn run_forward(params: &ParamSet, arch: &ArchSpec, batch: &[&[u32]]) -> Result<Trace> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let embedding = fetch(params, names::EMBEDDING)?;
    if embedding.shape() != (arch.vocab_size, arch.d_model) {
        return Err(Error::Shape(format!(
            "embedding is {:?}, architecture expects {:?}",
            embedding.shape(),
            (arch.vocab_size, arch.d_model)
        )));
    }
    let mut h = layers::mean_pool_embed(embedding, batch)?;
    check_finite(&h, names::EMBEDDING)?;
    let mut inputs = Vec::with_capacity(arch.num_blocks + 1);
    let mut acts = Vec::with_capacity(arch.num_blocks);
    for i in 0..arch.num_blocks {
        let w1 = effective_weight(params, &names::fc1_weight(i))?;
        let w2 = effective_weight(params, &names::fc2_weight(i))?;
        let (out, act) = residual_block(
            &h,
            &w1,
            fetch(params, &names::fc1_bias(i))?,
            &w2,
            fetch(params, &names::fc2_bias(i))?,
        )?;
        check_finite(&out, &format!("blocks.{i}"))?;
        inputs.push(h);
        acts.push(act);
        h = out;
    }
    let logits = linear(&h, fetch(params, names::HEAD_WEIGHT)?, fetch(params, names::HEAD_BIAS)?)?;
    check_finite(&logits, "head")?;
    if logits.cols() != arch.num_classes {
        return Err(Error::Shape(format!(
            "head emits {} logits, architecture expects {}",
            logits.cols(),
            arch.num_classes
        )));
    }
    inputs.push(h);
    Ok(Trace { inputs, acts, logits })
}

/// Logits, one row per sequence.
pub fn forward(params: &ParamSet, arch: &ArchSpec, batch: &[&[u32]]) -> Result<Matrix> {
    run_forward(params, arch, batch).map(|t| t.logits)
}

fn block_param_names(i: usize) -> Vec<String> {
    let mut v = Vec::with_capacity(8);
    for w in [names::fc1_weight(i), names::fc2_weight(i)] {
        v.push(names::lora_a(&w));
        v.push(names::lora_b(&w));
        v.push(w);
    }
    v.push(names::fc1_bias(i));
    v.push(names::fc2_bias(i));
    v
}

/// Distributes the gradient of an effective weight `W + B·A` to whichever of
/// `W`, `B`, `A` are trainable.
fn scatter_weight_grad(params: &ParamSet, name: &str, g_eff: Matrix, grads: &mut Grads) -> Result<()> {
    let (bn, an) = (names::lora_b(name), names::lora_a(name));
    if let (Some(b), Some(a)) = (params.get(&bn), params.get(&an)) {
        if params.is_trainable(&bn) {
            grads.insert(bn.clone(), g_eff.matmul_t(a)?);
        }
        if params.is_trainable(&an) {
            grads.insert(an.clone(), b.t_matmul(&g_eff)?);
        }
    }
    if params.is_trainable(name) {
        grads.insert(name.to_string(), g_eff);
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch and its gradients. Gradients are
/// returned for trainable parameters only, in parameter-set order.
pub fn loss_and_grads(params: &ParamSet, arch: &ArchSpec, batch: &[&[u32]], labels: &[usize]) -> Result<(f64, Grads)> {
    if params.trainable_names().next().is_none() {
        return Err(Error::NoTrainableParameters);
    }
    let trace = run_forward(params, arch, batch)?;
    let (loss, mut grad_h) = layers::softmax_cross_entropy(&trace.logits, labels)?;

    // stage_trainable[i]: some parameter of block i (or the embedding for
    // i == 0) or anything below it is trainable.
    let mut below = params.is_trainable(names::EMBEDDING);
    let mut stage_trainable = Vec::with_capacity(arch.num_blocks);
    for i in 0..arch.num_blocks {
        below |= block_param_names(i).iter().any(|n| params.is_trainable(n));
        stage_trainable.push(below);
    }

    let mut grads = Grads::new();
    let head_w = fetch(params, names::HEAD_WEIGHT)?;
    let need_below = stage_trainable.last().copied().unwrap_or(false);
    let head = linear_backward(&trace.inputs[arch.num_blocks], head_w, &grad_h, need_below)?;
    let mut block_grads: Vec<(String, Matrix)> = Vec::new();
    if params.is_trainable(names::HEAD_WEIGHT) {
        block_grads.push((names::HEAD_WEIGHT.into(), head.weight));
    }
    if params.is_trainable(names::HEAD_BIAS) {
        block_grads.push((names::HEAD_BIAS.into(), head.bias));
    }
    let Some(g) = head.input else {
        return finish(params, loss, block_grads, grads);
    };
    grad_h = g;

    for i in (0..arch.num_blocks).rev() {
        if !stage_trainable[i] {
            break;
        }
        let need_input = i > 0 && stage_trainable[i - 1] || (i == 0 && params.is_trainable(names::EMBEDDING));
        let x = &trace.inputs[i];
        let act = &trace.acts[i];
        let w1_name = names::fc1_weight(i);
        let w2_name = names::fc2_weight(i);
        let w1 = effective_weight(params, &w1_name)?;
        let w2 = effective_weight(params, &w2_name)?;

        let fc2 = linear_backward(act, &w2, &grad_h, true)?;
        let grad_pre = tanh_backward(act, fc2.input.as_ref().expect("requested"));
        let fc1 = linear_backward(x, &w1, &grad_pre, need_input)?;

        scatter_weight_grad(params, &w1_name, fc1.weight, &mut grads)?;
        scatter_weight_grad(params, &w2_name, fc2.weight, &mut grads)?;
        let b1 = names::fc1_bias(i);
        if params.is_trainable(&b1) {
            grads.insert(b1, fc1.bias);
        }
        let b2 = names::fc2_bias(i);
        if params.is_trainable(&b2) {
            grads.insert(b2, fc2.bias);
        }
        if !need_input {
            break;
        }
        // residual path plus the branch
        let mut g = fc1.input.expect("requested");
        g.add_assign(&grad_h)?;
        grad_h = g;
    }
    if params.is_trainable(names::EMBEDDING) {
        let embedding = fetch(params, names::EMBEDDING)?;
        let mut ge = Matrix::zeros(embedding.rows(), embedding.cols());
        layers::mean_pool_embed_backward(&grad_h, batch, &mut ge);
        grads.insert(names::EMBEDDING.into(), ge);
    }
    finish(params, loss, block_grads, grads)
}

fn finish(params: &ParamSet, loss: f64, extra: Vec<(String, Matrix)>, mut grads: Grads) -> Result<(f64, Grads)> {
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    grads.extend(extra);
    let mut ordered = Grads::with_capacity(grads.len());
    for name in params.trainable_names() {
        if let Some(g) = grads.swap_remove(name) {
            ordered.insert(name.to_string(), g);
        }
    }
    Ok((loss, ordered))
}
