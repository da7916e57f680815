//! Static description of every layer: parameter shapes, initializers and
//! multiply-accumulate counts. Parameter creation and the FLOPs/parameter
//! analyzer both read from here.

use std::fmt::Write as _;

use super::config::ModelConfig;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One row of the analyzer table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub path: String,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, Default)]
pub struct Architecture {
    pub params: Vec<ParamSpec>,
    pub layers: Vec<LayerCost>,
}

impl Architecture {
    /// Enumerates the network for an `height x width` input. Sizes are only
    /// used for MAC counts; they are not checked against the attention fit.
    pub fn new(config: &ModelConfig, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        let mut a = Architecture::default();
        let (mut h, mut w) = (height as u64, width as u64);
        a.conv("embed", 4, config.width(0), 1, h * w, Init::TruncNormal);
        for l in 0..config.depth {
            let c = config.width(l);
            for b in 0..config.ca_blocks_per_module {
                a.ca_block(config, &format!("enc{l}.block{b}"), c, h * w);
            }
            h /= 2;
            w /= 2;
            a.conv(&format!("enc{l}.down"), c, config.width(l + 1), 4, h * w, Init::TruncNormal);
        }
        let c = config.width(config.depth);
        for b in 0..config.ram_blocks {
            a.ram_block(config, &format!("bottleneck.block{b}"), c, h * w);
        }
        for l in (0..config.depth).rev() {
            let c = config.width(l);
            h *= 2;
            w *= 2;
            let p = format!("dec{l}");
            // a 2x2 stride-2 transposed conv touches every output pixel once per input channel
            a.conv_like(&format!("{p}.up"), &[config.width(l + 1), c, 2, 2], c, (config.width(l + 1) * c) as u64 * h * w);
            a.conv(&format!("{p}.fuse"), 2 * c, c, 1, h * w, Init::TruncNormal);
            for b in 0..config.ca_blocks_per_module {
                a.ca_block(config, &format!("{p}.block{b}"), c, h * w);
            }
        }
        a.conv("head", config.width(0), 3, 3, h * w, Init::Zeros);
        Ok(a)
    }

    fn push(&mut self, path: &str, specs: Vec<ParamSpec>, macs: u64) {
        let params = specs.iter().map(ParamSpec::numel).sum();
        self.params.extend(specs);
        self.layers.push(LayerCost { path: path.to_string(), params, macs });
    }

    fn conv(&mut self, path: &str, cin: usize, cout: usize, k: usize, pixels: u64, init: Init) {
        let macs = conv2d_macs(cin, cout, k, pixels);
        self.push(
            path,
            vec![
                ParamSpec { path: format!("{path}.weight"), shape: vec![cout, cin, k, k], init },
                ParamSpec { path: format!("{path}.bias"), shape: vec![cout], init: Init::Zeros },
            ],
            macs,
        );
    }

    fn conv_like(&mut self, path: &str, shape: &[usize], bias: usize, macs: u64) {
        self.push(
            path,
            vec![
                ParamSpec { path: format!("{path}.weight"), shape: shape.to_vec(), init: Init::TruncNormal },
                ParamSpec { path: format!("{path}.bias"), shape: vec![bias], init: Init::Zeros },
            ],
            macs,
        );
    }

    fn norm(&mut self, path: &str, c: usize) {
        self.push(
            path,
            vec![
                ParamSpec { path: format!("{path}.gamma"), shape: vec![c], init: Init::Ones },
                ParamSpec { path: format!("{path}.beta"), shape: vec![c], init: Init::Zeros },
            ],
            0,
        );
    }

    fn linear(&mut self, path: &str, cin: usize, cout: usize, rows: u64) {
        self.push(
            path,
            vec![
                ParamSpec { path: format!("{path}.weight"), shape: vec![cin, cout], init: Init::TruncNormal },
                ParamSpec { path: format!("{path}.bias"), shape: vec![cout], init: Init::Zeros },
            ],
            (cin * cout) as u64 * rows,
        );
    }

    fn channel_attention(&mut self, config: &ModelConfig, path: &str, c: usize) {
        let hidden = c / config.ca_reduction;
        self.linear(&format!("{path}.fc1"), c, hidden, 1);
        self.linear(&format!("{path}.fc2"), hidden, c, 1);
    }

    fn mlp(&mut self, config: &ModelConfig, path: &str, c: usize, pixels: u64) {
        let hidden = c * config.mlp_ratio;
        self.conv(&format!("{path}.fc1"), c, hidden, 1, pixels, Init::TruncNormal);
        self.conv(&format!("{path}.fc2"), hidden, c, 1, pixels, Init::TruncNormal);
    }

    fn ca_block(&mut self, config: &ModelConfig, path: &str, c: usize, pixels: u64) {
        self.norm(&format!("{path}.norm1"), c);
        self.channel_attention(config, &format!("{path}.ca"), c);
        self.norm(&format!("{path}.norm2"), c);
        self.mlp(config, &format!("{path}.mlp"), c, pixels);
    }

    fn ram_block(&mut self, config: &ModelConfig, path: &str, c: usize, pixels: u64) {
        self.norm(&format!("{path}.norm1"), c);
        let p = format!("{path}.attn");
        let mut specs = Vec::new();
        for name in ["q", "k", "v", "o"] {
            specs.push(ParamSpec { path: format!("{p}.w{name}"), shape: vec![c, c], init: Init::TruncNormal });
            specs.push(ParamSpec { path: format!("{p}.b{name}"), shape: vec![c], init: Init::Zeros });
        }
        let side = 2 * config.attention.region_size - 1;
        specs.push(ParamSpec {
            path: format!("{p}.rpb"),
            shape: vec![config.attention.num_heads, side, side],
            init: Init::TruncNormal,
        });
        let sources = (config.attention.region_size * config.attention.region_size) as u64;
        // projections, then logits and aggregation: n * r^2 * d_head * heads each
        let macs = 4 * (c * c) as u64 * pixels + 2 * pixels * sources * c as u64;
        self.push(&p, specs, macs);
        self.channel_attention(config, &format!("{path}.ca"), c);
        self.norm(&format!("{path}.norm2"), c);
        self.mlp(config, &format!("{path}.mlp"), c, pixels);
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    /// Plain-text breakdown: header, one `path params macs` row per layer,
    /// and a total row.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<32} {:>12} {:>16}", "path", "params", "macs");
        for l in &self.layers {
            let _ = writeln!(s, "{:<32} {:>12} {:>16}", l.path, l.params, l.macs);
        }
        let _ = writeln!(s, "{:<32} {:>12} {:>16}", "total", self.param_count(), self.macs());
        s
    }
}

/// Multiply-accumulates of a `k x k` convolution producing `pixels` output
/// positions (bias additions are not counted).
pub fn conv2d_macs(cin: usize, cout: usize, k: usize, pixels: u64) -> u64 {
    (cin * cout * k * k) as u64 * pixels
}

pub fn count_params(config: &ModelConfig) -> Result<usize> {
    // parameter shapes are size independent
    let f = config.size_factor();
    Ok(Architecture::new(config, f, f)?.param_count())
}

/// Twice the multiply-accumulate count of one forward pass on an
/// `height x width` image.
pub fn count_flops(config: &ModelConfig, height: usize, width: usize) -> Result<u64> {
    Ok(2 * Architecture::new(config, height, width)?.macs())
}

