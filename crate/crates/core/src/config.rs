//! `key = value` run configuration.
//!
//! Unknown keys are a hard error. [`RunConfig::to_text`] prints every key
//! with its resolved value, so a written config reproduces a run exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::NetworkConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: String,
    pub network: NetworkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: "default".into(),
            network: NetworkConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse::<usize>(key, v.trim()))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "experiment",
        "height",
        "width",
        "backbone_channels",
        "rpn_channels",
        "roi_channels",
        "roi_layers",
        "roi_kernel",
        "upsample_channels",
        "anchor_scales",
        "iou_hi",
        "iou_lo",
        "max_samples",
        "pre_nms_k",
        "nms_thresh",
        "post_nms_k",
        "detection",
        "lr",
        "momentum",
        "weight_decay",
        "lr_step_iters",
        "lr_gamma",
        "iterations",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let n = &mut self.network;
        match key {
            "experiment" => self.experiment = value.to_string(),
            "height" => n.height = parse(key, value)?,
            "width" => n.width = parse(key, value)?,
            "backbone_channels" => {
                n.backbone_channels = parse_list(key, value)?.try_into().map_err(|_| {
                    Error::Config("backbone_channels needs exactly 3 entries".into())
                })?
            }
            "rpn_channels" => n.rpn_channels = parse(key, value)?,
            "roi_channels" => n.roi_channels = parse(key, value)?,
            "roi_layers" => n.roi_layers = parse(key, value)?,
            "roi_kernel" => n.roi_kernel = parse(key, value)?,
            "upsample_channels" => n.upsample_channels = parse(key, value)?,
            "anchor_scales" => n.rpn.scales = parse_list(key, value)?,
            "iou_hi" => n.rpn.iou_hi = parse(key, value)?,
            "iou_lo" => n.rpn.iou_lo = parse(key, value)?,
            "max_samples" => n.rpn.max_samples = parse(key, value)?,
            "pre_nms_k" => n.rpn.pre_nms_k = parse(key, value)?,
            "nms_thresh" => n.rpn.nms_thresh = parse(key, value)?,
            "post_nms_k" => n.rpn.post_nms_k = parse(key, value)?,
            "detection" => n.detection_enabled = parse(key, value)?,
            "lr" => n.sgd.lr = parse(key, value)?,
            "momentum" => n.sgd.momentum = parse(key, value)?,
            "weight_decay" => n.sgd.weight_decay = parse(key, value)?,
            "lr_step_iters" => n.sgd.lr_step_iters = parse(key, value)?,
            "lr_gamma" => n.sgd.lr_gamma = parse(key, value)?,
            "iterations" => n.iterations = parse(key, value)?,
            "seed" => n.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn to_text(&self) -> String {
        let n = &self.network;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("experiment", self.experiment.clone());
        kv("height", n.height.to_string());
        kv("width", n.width.to_string());
        kv("backbone_channels", join(&n.backbone_channels));
        kv("rpn_channels", n.rpn_channels.to_string());
        kv("roi_channels", n.roi_channels.to_string());
        kv("roi_layers", n.roi_layers.to_string());
        kv("roi_kernel", n.roi_kernel.to_string());
        kv("upsample_channels", n.upsample_channels.to_string());
        kv("anchor_scales", join(&n.rpn.scales));
        kv("iou_hi", n.rpn.iou_hi.to_string());
        kv("iou_lo", n.rpn.iou_lo.to_string());
        kv("max_samples", n.rpn.max_samples.to_string());
        kv("pre_nms_k", n.rpn.pre_nms_k.to_string());
        kv("nms_thresh", n.rpn.nms_thresh.to_string());
        kv("post_nms_k", n.rpn.post_nms_k.to_string());
        kv("detection", n.detection_enabled.to_string());
        kv("lr", n.sgd.lr.to_string());
        kv("momentum", n.sgd.momentum.to_string());
        kv("weight_decay", n.sgd.weight_decay.to_string());
        kv("lr_step_iters", n.sgd.lr_step_iters.to_string());
        kv("lr_gamma", n.sgd.lr_gamma.to_string());
        kv("iterations", n.iterations.to_string());
        kv("seed", n.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments() {
        let c = RunConfig::parse(
            "# run\nlr = 0.01  # faster\n\ndetection = false\nanchor_scales = 4, 8\n",
        )
        .unwrap();
        assert_eq!(c.network.sgd.lr, 0.01);
        assert!(!c.network.detection_enabled);
        assert_eq!(c.network.rpn.scales, vec![4, 8]);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("lrr = 0.1").unwrap_err().to_string();
        assert!(err.contains("unknown key `lrr`"), "{err}");
        assert!(RunConfig::parse("lr 0.1").is_err());
        assert!(RunConfig::parse("lr = fast").is_err());
    }

    #[test]
    fn resolved_text_reproduces_config() {
        let mut c = RunConfig::default();
        c.apply_override("seed=42").unwrap();
        c.apply_override("backbone_channels=4,8,12").unwrap();
        c.network.sgd.lr = 0.0123;
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        for (line, key) in text.lines().zip(RunConfig::KEYS) {
            assert!(line.starts_with(&format!("{key} = ")));
        }
    }
}
