//! Flow-matching objective and the optimizer step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AdamW, Conditioning, Model, ModelError, Result};
use crate::flow::{self, Schedule};
use crate::tensor::{Graph, Tensor, Var};

/// One training example: a `[frames, channels]` feature sequence and its
/// caption tokens (`None` trains the unconditional path).
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub features: Tensor,
    pub tokens: Option<Vec<usize>>,
}

/// Stacks equally shaped `[frames, channels]` items into `[batch, frames, channels]`.
pub(crate) fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| ModelError::Batch("empty batch".into()))?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(ModelError::Batch(format!(
                "items differ in shape: {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::new(&shape, data)?)
}

impl Model {
    /// Flow-matching loss on `x0, eps: [batch, frames, channels]` at per-item
    /// times `t`, as a differentiable function of the parameter handles `p`.
    #[allow(clippy::too_many_arguments)]
    pub fn cfm_objective<'g>(
        &self,
        g: &'g Graph,
        p: &[Var<'g>],
        x0: &Tensor,
        eps: &Tensor,
        t: &[f64],
        cond: &Conditioning,
        schedule: Schedule,
    ) -> Result<Var<'g>> {
        let per_item = x0.numel() / t.len().max(1);
        if t.is_empty() || x0.shape() != eps.shape() || per_item * t.len() != x0.numel() {
            return Err(ModelError::Batch("times do not match the batch".into()));
        }
        let mut x_t = Vec::with_capacity(x0.numel());
        let mut u = Vec::with_capacity(x0.numel());
        for (b, &tb) in t.iter().enumerate() {
            let range = b * per_item..(b + 1) * per_item;
            let xb = Tensor::new(&[per_item], x0.data()[range.clone()].to_vec())?;
            let eb = Tensor::new(&[per_item], eps.data()[range].to_vec())?;
            x_t.extend(
                flow::interpolate(&xb, &eb, tb, schedule)
                    .map_err(flow_err)?
                    .into_data(),
            );
            u.extend(
                flow::target_velocity(&xb, &eb, tb, schedule)
                    .map_err(flow_err)?
                    .into_data(),
            );
        }
        let z = g.constant(Tensor::new(x0.shape(), x_t)?);
        let target = g.constant(Tensor::new(x0.shape(), u)?);
        let v = self.forward(g, p, z, t, cond)?;
        flow::cfm_loss(v, target).map_err(flow_err)
    }

    /// Draws `t` and `eps` per item from the `(seed, step)` stream, regresses
    /// the path velocity, and applies one optimizer update. Returns the loss
    /// before the update. On a non-finite loss or gradient nothing changes.
    pub fn train_step(
        &mut self,
        opt: &mut AdamW,
        batch: &[TrainItem],
        seed: u64,
        schedule: Schedule,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(ModelError::Batch("empty batch".into()));
        }
        let x0 = stack(&batch.iter().map(|i| &i.features).collect::<Vec<_>>())?;
        let cond = match batch.iter().filter(|i| i.tokens.is_some()).count() {
            0 => Conditioning::Unconditional,
            n if n == batch.len() => Conditioning::Captions(
                batch
                    .iter()
                    .map(|i| i.tokens.clone().expect("checked"))
                    .collect(),
            ),
            _ => {
                return Err(ModelError::Batch(
                    "mix of captioned and uncaptioned items".into(),
                ))
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(opt.step);
        let t: Vec<f64> = batch
            .iter()
            .map(|_| flow::sample_timestep(&mut rng))
            .collect();
        let eps = Tensor::from_fn(x0.shape(), |_| StandardNormal.sample(&mut rng))?;

        let g = Graph::new();
        let p = self.bind(&g);
        let loss = self.cfm_objective(&g, &p, &x0, &eps, &t, &cond, schedule)?;
        let value = loss.value().item().expect("scalar loss");
        if !value.is_finite() {
            return Err(ModelError::NonFinite("loss"));
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<Option<Tensor>> = p.iter().map(|v| grads.take(*v)).collect();
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite("gradient"));
        }
        drop(p);
        drop(g);
        opt.update(self.parameters_mut(), &grads);
        Ok(value)
    }
}

fn flow_err(e: flow::FlowError) -> ModelError {
    match e {
        flow::FlowError::Tensor(t) => ModelError::Tensor(t),
        other => ModelError::Batch(other.to_string()),
    }
}
