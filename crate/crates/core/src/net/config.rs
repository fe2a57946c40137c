use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Widths, depths and resolutions of the dual-encoder network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_hw_detection: (usize, usize),
    pub input_hw_recognition: (usize, usize),
    pub stage_channels: [usize; 5],
    /// Identity blocks after the projection block, stages 2 to 5 of encoder-1.
    pub encoder1_stage_repeats: [usize; 4],
    pub encoder2_middle_repeats: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub fcl_width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl NetworkConfig {
    /// Desk-scale default.
    pub fn toy() -> Self {
        NetworkConfig {
            input_hw_detection: (192, 256),
            input_hw_recognition: (192, 192),
            stage_channels: [8, 16, 32, 64, 128],
            encoder1_stage_repeats: [1, 2, 2, 2],
            encoder2_middle_repeats: 2,
            num_classes: 3,
            dropout_rate: 0.5,
            fcl_width: 64,
        }
    }

    /// ResNet-50 / Xception-like widths with an eight-fold middle flow.
    pub fn paper_scale() -> Self {
        NetworkConfig {
            stage_channels: [64, 256, 512, 1024, 2048],
            encoder1_stage_repeats: [2, 3, 5, 2],
            encoder2_middle_repeats: 8,
            fcl_width: 1024,
            ..Self::toy()
        }
    }

    /// Tiny network for gradient checks: 32 x 32 inputs, 1 x 1 bottleneck.
    pub fn micro() -> Self {
        NetworkConfig {
            input_hw_detection: (32, 32),
            input_hw_recognition: (32, 32),
            stage_channels: [2, 3, 3, 4, 4],
            encoder1_stage_repeats: [1, 1, 1, 1],
            encoder2_middle_repeats: 1,
            num_classes: 2,
            dropout_rate: 0.5,
            fcl_width: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (h, w)) in [
            ("input_hw_detection", self.input_hw_detection),
            ("input_hw_recognition", self.input_hw_recognition),
        ] {
            if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
                return Err(Error::Config(format!("{name} {h}x{w} must be positive multiples of 32")));
            }
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage_channels must be positive".into()));
        }
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes {} not in {{2, 3}}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.fcl_width == 0 {
            return Err(Error::Config("fcl_width must be positive".into()));
        }
        Ok(())
    }

    /// `key=value` lines, the form stored in weight files and config files.
    pub fn to_kv(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "input_hw_detection={},{}", self.input_hw_detection.0, self.input_hw_detection.1);
        let _ = writeln!(s, "input_hw_recognition={},{}", self.input_hw_recognition.0, self.input_hw_recognition.1);
        let _ = writeln!(s, "stage_channels={}", list(&self.stage_channels));
        let _ = writeln!(s, "encoder1_stage_repeats={}", list(&self.encoder1_stage_repeats));
        let _ = writeln!(s, "encoder2_middle_repeats={}", self.encoder2_middle_repeats);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "dropout_rate={}", self.dropout_rate);
        let _ = writeln!(s, "fcl_width={}", self.fcl_width);
        s
    }

    /// Parse `key=value` lines; unset keys keep their toy defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        for (key, value) in kv_pairs(text)? {
            if !cfg.set(key, value)? {
                return Err(Error::Config(format!("unknown network key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one key; returns false for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "input_hw_detection" => self.input_hw_detection = parse_pair(key, value)?,
            "input_hw_recognition" => self.input_hw_recognition = parse_pair(key, value)?,
            "stage_channels" => self.stage_channels = parse_array(key, value)?,
            "encoder1_stage_repeats" => self.encoder1_stage_repeats = parse_array(key, value)?,
            "encoder2_middle_repeats" => self.encoder2_middle_repeats = parse_num(key, value)?,
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_num(key, value)?,
            "fcl_width" => self.fcl_width = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Split `key=value` lines, skipping blanks and `#` comments.
pub fn kv_pairs(text: &str) -> Result<Vec<(&str, &str)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{l}`")))
        })
        .collect()
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    match parse_list(key, value)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("`{key}` needs two values"))),
    }
}

fn parse_array<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    parse_list(key, value)?
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {N} values")))
}
