//! INI-style run configuration.
//!
//! ```text
//! [fit]
//! steps = 2000
//! lr = 1e-4
//! slice_frames = 37   # 0 trains on the whole utterance
//!
//! [paths]
//! out = runs/a0007
//! ```

use std::path::PathBuf;

use voxkit::fit::FitConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub out: Option<PathBuf>,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for key {key}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if section != "fit" && section != "paths" {
                    return Err(format!("line {}: unknown section [{section}]", i + 1));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let f = &mut cfg.fit;
            match (section.as_str(), key) {
                ("fit", "lr") => f.lr = parse_num(key, value)?,
                ("fit", "lr_decay") => f.lr_decay = parse_num(key, value)?,
                ("fit", "beta1") => f.beta1 = parse_num(key, value)?,
                ("fit", "beta2") => f.beta2 = parse_num(key, value)?,
                ("fit", "weight_decay") => f.weight_decay = parse_num(key, value)?,
                ("fit", "eps") => f.eps = parse_num(key, value)?,
                ("fit", "lambda_dsp") => f.lambda_dsp = parse_num(key, value)?,
                ("fit", "steps") => f.steps = parse_num(key, value)?,
                ("fit", "seed") => f.seed = parse_num(key, value)?,
                ("fit", "slice_frames") => {
                    f.slice_frames = match parse_num::<usize>(key, value)? {
                        0 => None,
                        n => Some(n),
                    }
                }
                ("fit", "channels") => f.net.channels = parse_num(key, value)?,
                ("fit", "blocks") => f.net.blocks = parse_num(key, value)?,
                ("paths", "out") => cfg.out = Some(PathBuf::from(value)),
                ("", _) => return Err(format!("line {}: key {key} outside a section", i + 1)),
                (s, _) => return Err(format!("line {}: unknown key {key} in [{s}]", i + 1)),
            }
        }
        Ok(cfg)
    }
}
