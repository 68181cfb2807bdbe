//! Run configuration and its line-oriented `key = value` file format.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{ConfigError, Error, Result};
use crate::kd::KdConfig;
use crate::mole::MoleConfig;
use crate::vit::EncoderConfig;

pub const CHANNELS: usize = 3;
pub const MAX_CLASSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Stage::Pretrain => 0,
            Stage::Finetune => 1,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Stage::Pretrain),
            1 => Some(Stage::Finetune),
            _ => None,
        }
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(format!("unknown stage `{s}` (expected pretrain or finetune)")),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(format!("unknown optimizer `{s}` (expected adam or sgd)")),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

/// Cumulative ablation ladder; each variant adds one mechanism to the
/// previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KdVariant {
    /// Fixed interpolation targets, uniform token and teacher weights.
    MseBaseline,
    /// Learned adapters.
    Adapter,
    /// Adapters plus MoLE in the student.
    Mole,
    /// Plus attention-derived token weights.
    TokenWeights,
    /// Plus attention-derived teacher weights; the full method.
    TeacherWeights,
}

impl KdVariant {
    pub const LADDER: [KdVariant; 5] = [
        KdVariant::MseBaseline,
        KdVariant::Adapter,
        KdVariant::Mole,
        KdVariant::TokenWeights,
        KdVariant::TeacherWeights,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KdVariant::MseBaseline => "mse-baseline",
            KdVariant::Adapter => "+adapter",
            KdVariant::Mole => "+mole",
            KdVariant::TokenWeights => "+token-w",
            KdVariant::TeacherWeights => "+teacher-w",
        }
    }

    pub fn has_adapters(self) -> bool {
        self >= KdVariant::Adapter
    }

    pub fn has_mole(self) -> bool {
        self >= KdVariant::Mole
    }

    pub fn token_weighted(self) -> bool {
        self >= KdVariant::TokenWeights
    }

    pub fn teacher_weighted(self) -> bool {
        self >= KdVariant::TeacherWeights
    }
}

impl FromStr for KdVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let alias = match s {
            "full" => "+teacher-w",
            other => other,
        };
        KdVariant::LADDER
            .into_iter()
            .find(|v| v.as_str() == alias)
            .ok_or_else(|| {
                format!("unknown variant `{s}` (expected mse-baseline, +adapter, +mole, +token-w or +teacher-w)")
            })
    }
}

impl fmt::Display for KdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub encoder: EncoderConfig,
    /// The [CLS]-bearing teacher that supplies attention weights and
    /// initialises the student.
    pub clip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Step size for MoLE, adapters and head.
    pub learning_rate: f64,
    /// Step size for the student base encoder during finetune.
    pub encoder_learning_rate: f64,
    pub lambda_kd: f64,
    pub clip_fixed_weight: f64,
    pub num_classes: usize,
    pub image_size: usize,
    pub student: EncoderConfig,
    pub mole: MoleConfig,
    pub teachers: Vec<TeacherConfig>,
    pub adapter_hidden: Option<usize>,
    pub eval_images: usize,
    pub variant: KdVariant,
    pub trace_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

fn encoder(image_size: usize, patch: usize, depth: usize, dim: usize, heads: usize, cls: bool) -> EncoderConfig {
    EncoderConfig {
        image_size,
        patch_size: patch,
        channels: CHANNELS,
        depth,
        embed_dim: dim,
        num_heads: heads,
        ffn_hidden_dim: 2 * dim,
        has_cls_token: cls,
    }
}

impl Default for TrainConfig {
    /// The reference toy run: a 64-dim, depth-2 student on 32×32 images
    /// distilled from a [CLS] teacher plus two architecturally distinct
    /// teachers.
    fn default() -> Self {
        let student = encoder(32, 8, 2, 64, 4, true);
        Self {
            seed: 0,
            stage: Stage::Finetune,
            steps: 200,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            encoder_learning_rate: 1e-4,
            lambda_kd: crate::kd::DEFAULT_LAMBDA_KD,
            clip_fixed_weight: crate::kd::DEFAULT_CLIP_WEIGHT,
            num_classes: 4,
            image_size: 32,
            student: student.clone(),
            mole: MoleConfig::default(),
            teachers: vec![
                TeacherConfig {
                    encoder: student,
                    clip: true,
                },
                TeacherConfig {
                    encoder: encoder(32, 4, 2, 48, 4, false),
                    clip: false,
                },
                TeacherConfig {
                    encoder: encoder(32, 16, 1, 96, 4, false),
                    clip: false,
                },
            ],
            adapter_hidden: None,
            eval_images: 256,
            variant: KdVariant::TeacherWeights,
            trace_path: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        if !self.student.has_cls_token {
            return Err(Error::invalid("the student needs a [CLS] token"));
        }
        if self.student.image_size != self.image_size {
            return Err(Error::invalid("student image_size differs from image_size"));
        }
        self.mole.validate(self.student.embed_dim)?;
        self.kd().validate()?;
        if self.teachers.is_empty() {
            return Err(Error::invalid("at least one teacher is required"));
        }
        let clips: Vec<usize> = (0..self.teachers.len()).filter(|&i| self.teachers[i].clip).collect();
        if clips.len() != 1 {
            return Err(Error::invalid(format!(
                "exactly one teacher must set clip = true, found {}",
                clips.len()
            )));
        }
        for (i, t) in self.teachers.iter().enumerate() {
            t.encoder.validate()?;
            if t.encoder.image_size != self.image_size {
                return Err(Error::invalid(format!("teacher {i} image_size differs from image_size")));
            }
            if t.clip && t.encoder != self.student {
                return Err(Error::invalid(format!(
                    "teacher {i} initialises the student and must share its architecture"
                )));
            }
        }
        if let Some(h) = self.adapter_hidden {
            for s in self.adapter_shapes() {
                crate::adapters::AdapterShape { hidden: h, ..s }.validate()?;
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return Err(Error::invalid(format!(
                "num_classes must lie in 2..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        for (k, v) in [("learning_rate", self.learning_rate), ("encoder_learning_rate", self.encoder_learning_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{k} must be positive, got {v}")));
            }
        }
        if self.eval_images == 0 {
            return Err(Error::invalid("eval.images must be positive"));
        }
        Ok(())
    }

    pub fn clip_index(&self) -> usize {
        self.teachers.iter().position(|t| t.clip).unwrap_or(0)
    }

    /// With a single teacher the fixed-weight rule does not apply.
    pub fn kd(&self) -> KdConfig {
        KdConfig {
            lambda_kd: self.lambda_kd,
            clip_fixed_weight: self.clip_fixed_weight,
            clip_index: (self.teachers.len() > 1).then(|| self.clip_index()),
        }
    }

    pub fn adapter_shapes(&self) -> Vec<crate::adapters::AdapterShape> {
        self.teachers
            .iter()
            .map(|t| {
                crate::adapters::AdapterShape::new(
                    t.encoder.grid(),
                    self.student.grid(),
                    t.encoder.embed_dim,
                    self.student.embed_dim,
                    self.adapter_hidden,
                )
            })
            .collect()
    }

    /// Everything that determines parameter shapes and initial values.
    /// Step counts, rates, stage and paths are deliberately excluded so a
    /// checkpoint can be resumed under a different schedule.
    pub fn fingerprint(&self) -> u64 {
        let mut s = String::new();
        let _ = write!(
            s,
            "seed={};classes={};image={};variant={};mole={}x{};hidden={:?};student={}",
            self.seed,
            self.num_classes,
            self.image_size,
            self.variant,
            self.mole.experts,
            self.mole.rank,
            self.adapter_hidden,
            encoder_key(&self.student)
        );
        for t in &self.teachers {
            let _ = write!(s, ";teacher={},clip={}", encoder_key(&t.encoder), t.clip);
        }
        let digest = Sha256::digest(s.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg = parse_entries(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialises to the file format; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", &self.seed);
        kv("stage", &self.stage);
        kv("steps", &self.steps);
        kv("batch_size", &self.batch_size);
        kv("optimizer", &self.optimizer);
        kv("learning_rate", &self.learning_rate);
        kv("encoder_learning_rate", &self.encoder_learning_rate);
        kv("lambda_kd", &self.lambda_kd);
        kv("clip_fixed_weight", &self.clip_fixed_weight);
        kv("num_classes", &self.num_classes);
        kv("image_size", &self.image_size);
        kv("eval.images", &self.eval_images);
        kv("kd.variant", &self.variant);
        kv("mole.experts", &self.mole.experts);
        kv("mole.rank", &self.mole.rank);
        if let Some(h) = self.adapter_hidden {
            kv("adapter.hidden", &h);
        }
        for (k, v) in encoder_fields(&self.student) {
            kv(&format!("student.{k}"), &v);
        }
        for (i, t) in self.teachers.iter().enumerate() {
            kv(&format!("teacher.{i}.clip"), &t.clip);
            for (k, v) in encoder_fields(&t.encoder) {
                kv(&format!("teacher.{i}.{k}"), &v);
            }
            kv(&format!("teacher.{i}.cls"), &t.encoder.has_cls_token);
        }
        if let Some(p) = &self.trace_path {
            kv("output.trace", &p.display());
        }
        if let Some(p) = &self.checkpoint_path {
            kv("output.checkpoint", &p.display());
        }
        s
    }
}

fn encoder_key(e: &EncoderConfig) -> String {
    format!(
        "{}/{}/{}/{}/{}/{}/{}/{}",
        e.image_size, e.patch_size, e.channels, e.depth, e.embed_dim, e.num_heads, e.ffn_hidden_dim, e.has_cls_token
    )
}

fn encoder_fields(e: &EncoderConfig) -> [(&'static str, usize); 5] {
    [
        ("patch_size", e.patch_size),
        ("depth", e.depth),
        ("embed_dim", e.embed_dim),
        ("num_heads", e.num_heads),
        ("ffn_hidden_dim", e.ffn_hidden_dim),
    ]
}

struct Entry<'a> {
    line: usize,
    value: &'a str,
}

fn value<T: FromStr>(e: &Entry<'_>) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    e.value.parse::<T>().map_err(|err| ConfigError::Parse {
        line: e.line,
        message: format!("bad value `{}`: {err}", e.value),
    })
}

fn set_encoder_field(e: &mut EncoderConfig, field: &str, entry: &Entry<'_>) -> Result<bool, ConfigError> {
    match field {
        "patch_size" => e.patch_size = value(entry)?,
        "depth" => e.depth = value(entry)?,
        "embed_dim" => e.embed_dim = value(entry)?,
        "num_heads" => e.num_heads = value(entry)?,
        "ffn_hidden_dim" => e.ffn_hidden_dim = value(entry)?,
        _ => return Ok(false),
    }
    Ok(true)
}

#[derive(Default)]
struct TeacherDraft<'a> {
    fields: Vec<(&'a str, Entry<'a>)>,
}

fn parse_entries(text: &str) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::default();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut student_fields: Vec<(&str, Entry<'_>)> = Vec::new();
    let mut teachers: BTreeMap<usize, TeacherDraft<'_>> = BTreeMap::new();
    let mut student_ffn_set = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, val) = content.split_once('=').ok_or_else(|| ConfigError::Parse {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim();
        let val = val.trim();
        if key.is_empty() {
            return Err(ConfigError::Parse {
                line,
                message: "empty key".into(),
            });
        }
        if val.is_empty() {
            return Err(ConfigError::Parse {
                line,
                message: format!("missing value for `{key}`"),
            });
        }
        if let Some(first) = seen.insert(key, line) {
            return Err(ConfigError::Parse {
                line,
                message: format!("duplicate key `{key}` (first set on line {first})"),
            });
        }
        let e = Entry { line, value: val };
        match key {
            "seed" => cfg.seed = value(&e)?,
            "stage" => cfg.stage = value(&e)?,
            "steps" => cfg.steps = value(&e)?,
            "batch_size" => cfg.batch_size = value(&e)?,
            "optimizer" => cfg.optimizer = value(&e)?,
            "learning_rate" => cfg.learning_rate = value(&e)?,
            "encoder_learning_rate" => cfg.encoder_learning_rate = value(&e)?,
            "lambda_kd" => cfg.lambda_kd = value(&e)?,
            "clip_fixed_weight" => cfg.clip_fixed_weight = value(&e)?,
            "num_classes" => cfg.num_classes = value(&e)?,
            "image_size" => cfg.image_size = value(&e)?,
            "eval.images" => cfg.eval_images = value(&e)?,
            "kd.variant" => cfg.variant = value(&e)?,
            "mole.experts" => cfg.mole.experts = value(&e)?,
            "mole.rank" => cfg.mole.rank = value(&e)?,
            "adapter.hidden" => cfg.adapter_hidden = Some(value(&e)?),
            "output.trace" => cfg.trace_path = Some(PathBuf::from(val)),
            "output.checkpoint" => cfg.checkpoint_path = Some(PathBuf::from(val)),
            _ => {
                if let Some(field) = key.strip_prefix("student.") {
                    student_ffn_set |= field == "ffn_hidden_dim";
                    student_fields.push((field, e));
                } else if let Some(rest) = key.strip_prefix("teacher.") {
                    let (id, field) = rest.split_once('.').ok_or_else(|| ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })?;
                    let id: usize = id.parse().map_err(|_| ConfigError::Parse {
                        line,
                        message: format!("teacher index `{id}` is not a number"),
                    })?;
                    teachers.entry(id).or_default().fields.push((field, e));
                } else {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    });
                }
            }
        }
    }

    cfg.student.image_size = cfg.image_size;
    for (field, e) in &student_fields {
        if !set_encoder_field(&mut cfg.student, field, e)? {
            return Err(ConfigError::UnknownKey {
                line: e.line,
                key: format!("student.{field}"),
            });
        }
    }
    if !student_ffn_set && student_fields.iter().any(|(f, _)| *f == "embed_dim") {
        cfg.student.ffn_hidden_dim = 2 * cfg.student.embed_dim;
    }

    if teachers.is_empty() {
        for t in &mut cfg.teachers {
            t.encoder.image_size = cfg.image_size;
            if t.clip {
                t.encoder = cfg.student.clone();
            }
        }
    } else {
        let expected: Vec<usize> = (0..teachers.len()).collect();
        let got: Vec<usize> = teachers.keys().copied().collect();
        if got != expected {
            return Err(ConfigError::Invalid(format!(
                "teacher indices must be 0..{} without gaps, got {got:?}",
                teachers.len()
            )));
        }
        cfg.teachers = teachers
            .into_values()
            .map(|draft| build_teacher(&cfg.student, draft))
            .collect::<Result<_, _>>()?;
    }
    Ok(cfg)
}

/// Unset teacher fields inherit the student's; the [CLS] teacher is the
/// student's architecture unless overridden.
fn build_teacher(student: &EncoderConfig, draft: TeacherDraft<'_>) -> Result<TeacherConfig, ConfigError> {
    let mut enc = student.clone();
    let mut clip = false;
    let mut cls: Option<bool> = None;
    let mut ffn_set = false;
    let mut dim_set = false;
    for (field, e) in &draft.fields {
        match *field {
            "clip" => clip = value(e)?,
            "cls" => cls = Some(value(e)?),
            f => {
                ffn_set |= f == "ffn_hidden_dim";
                dim_set |= f == "embed_dim";
                if !set_encoder_field(&mut enc, f, e)? {
                    return Err(ConfigError::UnknownKey {
                        line: e.line,
                        key: format!("teacher.?.{f}"),
                    });
                }
            }
        }
    }
    if dim_set && !ffn_set {
        enc.ffn_hidden_dim = 2 * enc.embed_dim;
    }
    enc.has_cls_token = cls.unwrap_or(clip);
    Ok(TeacherConfig { encoder: enc, clip })
}
