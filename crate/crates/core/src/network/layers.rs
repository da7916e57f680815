//! Forward pass of the encoder-decoder on a tape. Activations are NCHW.

use rasm_tensor::{Element, Tape, Tensor, Var};

use super::config::{AttentionKind, ModelConfig};
use super::params::{Bound, ParameterSet};
use crate::attention::{
    attention_map_dump, regional_attention, window_attention, AttentionMap, AttentionParams, AttentionWeights,
};
use crate::error::{Error, Result};

fn conv<T: Element>(tape: &mut Tape<T>, x: Var, p: &Bound, path: &str, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{path}.weight"))?;
    let b = p.get(&format!("{path}.bias"))?;
    Ok(tape.conv2d(x, w, Some(b), stride, pad)?)
}

fn norm<T: Element>(tape: &mut Tape<T>, x: Var, p: &Bound, path: &str) -> Result<Var> {
    let g = p.get(&format!("{path}.gamma"))?;
    let b = p.get(&format!("{path}.beta"))?;
    Ok(tape.layer_norm(x, g, b, 1)?)
}

fn linear<T: Element>(tape: &mut Tape<T>, x: Var, p: &Bound, path: &str) -> Result<Var> {
    let w = p.get(&format!("{path}.weight"))?;
    let b = p.get(&format!("{path}.bias"))?;
    Ok(rasm_tensor::nn::linear(tape, x, w, b)?)
}

fn spatial<T: Element>(tape: &Tape<T>, x: Var) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::Dimension(format!("expected an NCHW feature map, got {s:?}"))),
    }
}

/// Pointwise projection of the image and mask channels to the embedding width.
pub fn linear_proj<T: Element>(tape: &mut Tape<T>, shadow: Var, mask: Var, p: &Bound) -> Result<Var> {
    let [n, c, h, w] = spatial(tape, shadow)?;
    let [mn, mc, mh, mw] = spatial(tape, mask)?;
    if c != 3 || mc != 1 || (n, h, w) != (mn, mh, mw) {
        return Err(Error::Dimension(format!(
            "image {:?} and mask {:?} must be [N, 3, H, W] and [N, 1, H, W]",
            tape.shape(shadow),
            tape.shape(mask)
        )));
    }
    let x = tape.concat(&[shadow, mask], 1)?;
    conv(tape, x, p, "embed", 1, 0)
}

/// Squeeze-excitation gate: pool, bottleneck MLP with GELU, sigmoid, rescale.
pub fn channel_attention<T: Element>(tape: &mut Tape<T>, x: Var, p: &Bound, path: &str) -> Result<Var> {
    let [n, c, _, _] = spatial(tape, x)?;
    let pooled = tape.global_avg_pool(x)?;
    let hidden = linear(tape, pooled, p, &format!("{path}.fc1"))?;
    let hidden = tape.gelu(hidden);
    let gate = linear(tape, hidden, p, &format!("{path}.fc2"))?;
    let gate = tape.sigmoid(gate);
    let gate = tape.reshape(gate, &[n, c, 1, 1])?;
    Ok(tape.mul(x, gate)?)
}

/// `GELU(MLP(LN(x))) + x`, the MLP being two pointwise convolutions with a
/// GELU between them.
fn mlp_residual<T: Element>(tape: &mut Tape<T>, x: Var, p: &Bound, path: &str) -> Result<Var> {
    let y = norm(tape, x, p, &format!("{path}.norm2"))?;
    let y = conv(tape, y, p, &format!("{path}.mlp.fc1"), 1, 0)?;
    let y = tape.gelu(y);
    let y = conv(tape, y, p, &format!("{path}.mlp.fc2"), 1, 0)?;
    let y = tape.gelu(y);
    Ok(tape.add(y, x)?)
}

/// `x~ = CA(LN(x)) + x`, then `GELU(MLP(LN(x~))) + x~`.
pub fn ca_block<T: Element>(tape: &mut Tape<T>, x: Var, p: &Bound, path: &str) -> Result<Var> {
    let y = norm(tape, x, p, &format!("{path}.norm1"))?;
    let y = channel_attention(tape, y, p, &format!("{path}.ca"))?;
    let x = tape.add(y, x)?;
    mlp_residual(tape, x, p, path)
}

fn attention_params(p: &Bound, path: &str) -> Result<AttentionParams> {
    let names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "rpb"];
    let vars = names.iter().map(|n| p.get(&format!("{path}.{n}"))).collect::<Result<Vec<_>>>()?;
    Ok(AttentionParams::from_slice(&vars))
}

/// `x~ = CA(Attn(LN(x))) + x`, then the MLP residual. `index` selects the
/// half-window shift on odd blocks when window attention is configured.
pub fn ram_block<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &Bound,
    path: &str,
    config: &ModelConfig,
    index: usize,
) -> Result<Var> {
    let [n, c, h, w] = spatial(tape, x)?;
    let y = norm(tape, x, p, &format!("{path}.norm1"))?;
    let tokens = tape.reshape(y, &[n, c, h * w])?;
    let tokens = tape.permute(tokens, &[0, 2, 1])?;
    let ap = attention_params(p, &format!("{path}.attn"))?;
    let a = &config.attention;
    let attended = match a.kind {
        AttentionKind::Regional => regional_attention(tape, tokens, &ap, &config.attention_config(), h, w)?,
        AttentionKind::Window => {
            let shift = if index % 2 == 1 { a.region_size / 2 } else { 0 };
            window_attention(tape, tokens, &ap, a.num_heads, a.region_size, shift, h, w)?
        }
    };
    let y = tape.permute(attended, &[0, 2, 1])?;
    let y = tape.reshape(y, &[n, c, h, w])?;
    let y = channel_attention(tape, y, p, &format!("{path}.ca"))?;
    let x = tape.add(y, x)?;
    mlp_residual(tape, x, p, path)
}

/// 4x4 stride-2 convolution halving the spatial size.
pub fn downsample<T: Element>(tape: &mut Tape<T>, x: Var, p: &Bound, path: &str) -> Result<Var> {
    let [_, _, h, w] = spatial(tape, x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("downsampling needs even sides, got {h}x{w}")));
    }
    conv(tape, x, p, path, 2, 1)
}

/// 2x2 stride-2 transposed convolution doubling the spatial size.
pub fn upsample<T: Element>(tape: &mut Tape<T>, x: Var, p: &Bound, path: &str) -> Result<Var> {
    let w = p.get(&format!("{path}.weight"))?;
    let b = p.get(&format!("{path}.bias"))?;
    Ok(tape.conv_transpose2d(x, w, Some(b), 2, 0)?)
}

/// Full network: returns `shadow + residual`, unclipped.
pub fn rasm_forward<T: Element>(
    tape: &mut Tape<T>,
    shadow: Var,
    mask: Var,
    p: &Bound,
    config: &ModelConfig,
) -> Result<Var> {
    let [_, _, h, w] = spatial(tape, shadow)?;
    config.check_input(h, w)?;
    let mut x = linear_proj(tape, shadow, mask, p)?;
    let mut skips = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        for b in 0..config.ca_blocks_per_module {
            x = ca_block(tape, x, p, &format!("enc{l}.block{b}"))?;
        }
        skips.push(x);
        x = downsample(tape, x, p, &format!("enc{l}.down"))?;
    }
    for b in 0..config.ram_blocks {
        x = ram_block(tape, x, p, &format!("bottleneck.block{b}"), config, b)?;
    }
    for l in (0..config.depth).rev() {
        x = upsample(tape, x, p, &format!("dec{l}.up"))?;
        x = tape.concat(&[x, skips[l]], 1)?;
        x = conv(tape, x, p, &format!("dec{l}.fuse"), 1, 0)?;
        for b in 0..config.ca_blocks_per_module {
            x = ca_block(tape, x, p, &format!("dec{l}.block{b}"))?;
        }
    }
    let residual = conv(tape, x, p, "head", 1, 1)?;
    Ok(tape.add(shadow, residual)?)
}

fn batched<T: Element>(t: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    match *t.shape() {
        [c, h, w] if c == channels => Ok(t.clone().reshape(&[1, c, h, w])?),
        [_, c, _, _] if c == channels => Ok(t.clone()),
        ref s => Err(Error::Dimension(format!("expected [{channels}, H, W] or [N, {channels}, H, W], got {s:?}"))),
    }
}

/// Inference: runs the network without gradients and clips to `[0, 1]`.
/// Accepts `[3, H, W]` / `[1, H, W]` or batched inputs; the output has the
/// input's rank.
pub fn predict<T: Element>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    shadow: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = batched(shadow, 3)?;
    let m = batched(mask, 1)?;
    let mut tape = Tape::new();
    let sv = tape.constant(s);
    let mv = tape.constant(m);
    let bound = params.bind(&mut tape, false);
    let out = rasm_forward(&mut tape, sv, mv, &bound, config)?;
    let clipped = tape.value(out).map(|v| v.max(T::zero()).min(T::one()));
    Ok(clipped.reshape(shadow.shape())?)
}

/// Attention distribution of bottleneck block `block` at bottleneck pixel
/// `query` for a single `[3, H, W]` image, as produced by the trained
/// weights. Regional attention only.
pub fn bottleneck_attention_map<T: Element>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    shadow: &Tensor<T>,
    mask: &Tensor<T>,
    block: usize,
    query: (usize, usize),
) -> Result<AttentionMap> {
    if config.attention.kind != AttentionKind::Regional {
        return Err(Error::Config("attention maps need regional bottleneck attention".into()));
    }
    if block >= config.ram_blocks {
        return Err(Error::Index(format!("bottleneck block {block} of {}", config.ram_blocks)));
    }
    let (s, m) = (batched(shadow, 3)?, batched(mask, 1)?);
    if s.shape()[0] != 1 {
        return Err(Error::Dimension("attention maps take a single image".into()));
    }
    let [_, _, h, w] = [s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]];
    config.check_input(h, w)?;
    let mut tape = Tape::new();
    let (sv, mv) = (tape.constant(s), tape.constant(m));
    let p = params.bind(&mut tape, false);
    let mut x = linear_proj(&mut tape, sv, mv, &p)?;
    for l in 0..config.depth {
        for b in 0..config.ca_blocks_per_module {
            x = ca_block(&mut tape, x, &p, &format!("enc{l}.block{b}"))?;
        }
        x = downsample(&mut tape, x, &p, &format!("enc{l}.down"))?;
    }
    for b in 0..block {
        x = ram_block(&mut tape, x, &p, &format!("bottleneck.block{b}"), config, b)?;
    }
    let [_, c, bh, bw] = spatial(&tape, x)?;
    let path = format!("bottleneck.block{block}");
    let y = norm(&mut tape, x, &p, &format!("{path}.norm1"))?;
    let tokens = tape.reshape(y, &[c, bh * bw])?;
    let tokens = tape.permute(tokens, &[1, 0])?;
    let names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "rpb"];
    let t = names.map(|n| params.get(&format!("{path}.attn.{n}")).cloned());
    let [a, b, c2, d, e, f, g, h2, i] = t;
    let weights = AttentionWeights::from_tensors([a?, b?, c2?, d?, e?, f?, g?, h2?, i?]);
    attention_map_dump(tape.value(tokens), &weights, &config.attention_config(), bh, bw, query)
}
