//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::distiller::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{validate_fractions, DEFAULT_FRACTIONS};
use crate::segnet::ModelConfig;
use crate::synthdata::SceneConfig;

trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, f64, f32, bool);

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| T::parse(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! experiment_config {
    ($($key:literal => $field:ident : $t:ty = $default:expr,)*) => {
        /// Every tunable of the pipeline. Field names mirror the config keys
        /// with `.` replaced by `_`.
        #[derive(Clone, Debug, PartialEq)]
        pub struct ExperimentConfig {
            $(pub $field: $t,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                ExperimentConfig { $($field: $default,)* }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = <$t as Value>::parse(value)
                            .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(Value::render(&self.$field)),)*
                    _ => None,
                }
            }
        }
    };
}

experiment_config! {
    "seed" => seed: u64 = 0,
    "scene.size" => scene_size: usize = 96,
    "scene.classes" => scene_classes: usize = 6,
    "scene.noise" => scene_noise: f32 = 0.12,
    "scene.void_border" => scene_void_border: usize = 1,
    "scene.shapes_min" => scene_shapes_min: usize = 3,
    "scene.shapes_max" => scene_shapes_max: usize = 6,
    "scene.ood_probability" => scene_ood_probability: f64 = 0.5,
    "data.train" => data_train: usize = 512,
    "data.test" => data_test: usize = 128,
    "model.encoder_widths" => model_encoder_widths: Vec<usize> = vec![8, 16, 32],
    "model.decoder_width" => model_decoder_width: usize = 32,
    "model.kernel" => model_kernel: usize = 3,
    "model.input_size" => model_input_size: usize = 64,
    "teacher.members" => teacher_members: usize = 10,
    "teacher.epochs" => teacher_epochs: usize = 30,
    "train.epochs" => train_epochs: usize = 60,
    "train.batch_size" => train_batch_size: usize = 8,
    "train.base_lr" => train_base_lr: f64 = 0.003,
    "train.momentum" => train_momentum: f64 = 0.9,
    "train.weight_decay" => train_weight_decay: f64 = 0.0005,
    "train.decoder_lr_multiplier" => train_decoder_lr_multiplier: f64 = 10.0,
    "train.lr_power" => train_lr_power: f64 = 0.9,
    "train.decay_bias" => train_decay_bias: bool = true,
    "train.scale_min" => train_scale_min: f64 = 0.5,
    "train.scale_max" => train_scale_max: f64 = 2.0,
    "train.flip_probability" => train_flip_probability: f64 = 0.5,
    "distill.recompute_targets" => distill_recompute_targets: bool = false,
    "eval.fractions" => eval_fractions: Vec<f64> = DEFAULT_FRACTIONS.to_vec(),
    "eval.gt_class_uncertainty" => eval_gt_class_uncertainty: bool = false,
    "eval.panels" => eval_panels: usize = 4,
    "ablation.sizes" => ablation_sizes: Vec<usize> = vec![2, 6, 8, 10, 12],
    "ablation.draws" => ablation_draws: usize = 3,
    "bench.runs" => bench_runs: usize = 25,
    "bench.warmup" => bench_warmup: usize = 3,
}

impl ExperimentConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, config_detail(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                what: "config file".into(),
                path: path.to_path_buf(),
            },
            _ => Error::io(path, e),
        })?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            offset: e.utf8_error().valid_up_to() as u64,
            detail: "config is not UTF-8".into(),
        })?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    /// Every key with its resolved value, one per line in a fixed order.
    pub fn to_text(&self) -> String {
        self.render_keys(|_| true)
    }

    /// Resolved lines for keys selected by `keep`.
    pub fn render_keys(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut s = String::new();
        for key in Self::KEYS.iter().filter(|k| keep(k)) {
            let _ = writeln!(s, "{key} = {}", self.get(key).unwrap());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_config().validate()?;
        self.model_config().validate()?;
        self.student_train_config().validate()?;
        validate_fractions(&self.eval_fractions).map_err(|e| Error::Config(config_detail(e)))?;
        if self.teacher_members == 0 {
            return Err(Error::Config("teacher.members must be at least 1".into()));
        }
        if self.data_train == 0 || self.data_test == 0 {
            return Err(Error::Config("data.train and data.test must be positive".into()));
        }
        if self.ablation_sizes.iter().any(|&m| m == 0) || self.ablation_draws == 0 {
            return Err(Error::Config("ablation sizes and draws must be positive".into()));
        }
        if self.bench_runs < 5 {
            return Err(Error::Config("bench.runs must be at least 5".into()));
        }
        if self.model_input_size > self.scene_size {
            return Err(Error::Config("model.input_size exceeds scene.size".into()));
        }
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            noise: self.scene_noise,
            void_border: self.scene_void_border,
            shapes_min: self.scene_shapes_min,
            shapes_max: self.scene_shapes_max,
            ood_probability: self.scene_ood_probability,
            ..SceneConfig::with_classes(self.scene_size, self.scene_classes)
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            classes: self.scene_classes,
            encoder_widths: self.model_encoder_widths.clone(),
            decoder_width: self.model_decoder_width,
            kernel: self.model_kernel,
            input_size: self.model_input_size,
        }
    }

    pub fn student_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.train_batch_size,
            base_lr: self.train_base_lr,
            momentum: self.train_momentum,
            weight_decay: self.train_weight_decay,
            decoder_lr_multiplier: self.train_decoder_lr_multiplier,
            lr_power: self.train_lr_power,
            seed: self.student_seed(),
            decay_bias: self.train_decay_bias,
            scale_min: self.train_scale_min,
            scale_max: self.train_scale_max,
            flip_probability: self.train_flip_probability,
        }
    }

    /// Member training settings; the per-member seed is applied by the
    /// ensemble trainer.
    pub fn teacher_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.teacher_epochs,
            ..self.student_train_config()
        }
    }

    pub fn train_data_seed(&self) -> u64 {
        crate::synthdata::derive_seed(self.seed, 1)
    }

    pub fn test_data_seed(&self) -> u64 {
        crate::synthdata::derive_seed(self.seed, 2)
    }

    pub fn student_seed(&self) -> u64 {
        crate::synthdata::derive_seed(self.seed, 3)
    }

    /// Seed of member `i`; ablation pools extend the same sequence, so the
    /// first members of a pool are the teacher members.
    pub fn member_seed(&self, i: usize) -> u64 {
        crate::synthdata::derive_seed(self.seed, 1000 + i as u64)
    }

    pub fn ablation_draw_seed(&self, draw: usize) -> u64 {
        crate::synthdata::derive_seed(self.seed, 2000 + draw as u64)
    }
}

fn config_detail(e: Error) -> String {
    match e {
        Error::Config(s) => s,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_blank_lines_and_values() {
        let cfg = ExperimentConfig::parse("# header\n\nseed = 7  # trailing\nmodel.encoder_widths = 4, 8\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model_encoder_widths, vec![4, 8]);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let e = ExperimentConfig::parse("seed = 1\nteacher.size = 3\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(e.to_string().contains("teacher.size"), "{e}");
    }

    #[test]
    fn bad_values_rejected() {
        assert!(ExperimentConfig::parse("seed = -1").is_err());
        assert!(ExperimentConfig::parse("eval.fractions = 0.5,0.2").is_err());
        assert!(ExperimentConfig::parse("scene.classes = 1").is_err());
        assert!(ExperimentConfig::parse("just a line").is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = ExperimentConfig::parse("train.epochs = 5\n").unwrap();
        cfg.apply_override("train.epochs=9").unwrap();
        assert_eq!(cfg.train_epochs, 9);
        assert_eq!(cfg.student_train_config().epochs, 9);
        assert!(cfg.apply_override("train.epochs").is_err());
        assert!(cfg.apply_override("nope=1").is_err());
    }

    #[test]
    fn every_key_is_renderable() {
        let cfg = ExperimentConfig::default();
        for key in ExperimentConfig::KEYS {
            let mut copy = cfg.clone();
            copy.set(key, &cfg.get(key).unwrap()).unwrap();
            assert_eq!(copy, cfg);
        }
    }
}
