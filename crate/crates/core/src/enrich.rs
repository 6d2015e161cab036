//! Expert-context rendering and conversation assembly.
//!
//! A basic record is the image's QA sequence as alternating human/assistant
//! turns. An enhanced record is the same conversation with the rendered
//! expert context prepended to the human turns.
//!
//! Human turn layout:
//!
//! ```text
//! [<image>\n]  [context\n]  question
//! ```
//!
//! The image token appears only on the first human turn. The context prefix
//! appears on every human turn ([`ContextPlacement::PerTurn`]) or only the
//! first ([`ContextPlacement::FirstTurn`]), and is omitted entirely when the
//! context text is empty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{ExpertPrediction, ImageRecord, QaRecord};
use crate::error::{Error, Result};

/// Version tag of the context template; recorded in every output record.
pub const TEMPLATE_VERSION: &str = "expert-context-v1";

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_IMAGE_TOKEN: &str = "<image>";

const CONTEXT_LEAD: &str = "Expert model predictions \u{2014} findings: ";
const NO_FINDINGS: &str = "no positive findings";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertContext {
    pub text: String,
    pub source: ExpertPrediction,
    pub threshold: f64,
}

/// Rounds half-up to a whole number of years.
pub fn round_age(age_years: f64) -> u64 {
    (age_years + 0.5).floor() as u64
}

pub fn render_expert_context(pred: &ExpertPrediction, threshold: f64) -> Result<ExpertContext> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Contract(format!("threshold must lie in [0,1], got {threshold}")));
    }
    pred.check()?;
    let findings: Vec<&str> = pred
        .disease_probs
        .iter()
        .filter(|(_, p)| *p >= threshold)
        .map(|(c, _)| c.label())
        .collect();
    let findings = if findings.is_empty() {
        NO_FINDINGS.to_string()
    } else {
        findings.join(", ")
    };
    let text = format!(
        "{CONTEXT_LEAD}{findings}; age: {} years; race: {}; view: {}.",
        round_age(pred.age_years),
        pred.race,
        pred.view
    );
    Ok(ExpertContext {
        text,
        source: pred.clone(),
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    #[serde(rename = "from")]
    pub speaker: Speaker,
    #[serde(rename = "value")]
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Basic,
    Enhanced,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::Enhanced => "enhanced",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Variant::Basic),
            "enhanced" => Ok(Variant::Enhanced),
            other => Err(Error::Config(format!("unknown variant: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPlacement {
    #[default]
    PerTurn,
    FirstTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnrichOptions {
    pub threshold: f64,
    pub image_token: String,
    pub placement: ContextPlacement,
}

impl Default for EnrichOptions {
    fn default() -> Self {
        EnrichOptions {
            threshold: DEFAULT_THRESHOLD,
            image_token: DEFAULT_IMAGE_TOKEN.to_string(),
            placement: ContextPlacement::PerTurn,
        }
    }
}

/// One line of an instruction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    /// Record id; one record per image, so this is the image id.
    #[serde(rename = "id")]
    pub image_id: String,
    /// Image reference (the image's opaque path).
    pub image: String,
    #[serde(rename = "conversations")]
    pub turns: Vec<ConversationTurn>,
    pub variant: Variant,
    pub template_version: String,
}

impl InstructionRecord {
    /// Human turn `t` with the leading image token (if any) removed.
    pub fn human_body<'a>(&'a self, t: usize, image_token: &str) -> Option<&'a str> {
        let turn = self.turns.get(2 * t)?;
        if t == 0 {
            let with_sep = format!("{image_token}\n");
            Some(turn.text.strip_prefix(with_sep.as_str()).unwrap_or(&turn.text))
        } else {
            Some(&turn.text)
        }
    }

    pub fn n_exchanges(&self) -> usize {
        self.turns.len() / 2
    }
}

fn check_qas(image: &ImageRecord, qas: &[QaRecord]) -> Result<()> {
    if qas.is_empty() {
        return Err(Error::Contract(format!("image {}: empty QA list", image.image_id)));
    }
    let foreign: Vec<&str> = qas
        .iter()
        .filter(|q| q.image_id != image.image_id)
        .map(|q| q.qa_id.as_str())
        .collect();
    if !foreign.is_empty() {
        return Err(Error::Contract(format!(
            "QAs {} do not belong to image {}",
            foreign.join(", "),
            image.image_id
        )));
    }
    Ok(())
}

/// The text a human turn carries for question `t`, before the image token.
pub fn human_prompt(question: &str, context: Option<&str>, t: usize, placement: ContextPlacement) -> String {
    let use_ctx = match placement {
        ContextPlacement::PerTurn => true,
        ContextPlacement::FirstTurn => t == 0,
    };
    match context {
        Some(ctx) if use_ctx && !ctx.is_empty() => format!("{ctx}\n{question}"),
        _ => question.to_string(),
    }
}

fn assemble(
    image: &ImageRecord,
    qas: &[QaRecord],
    context: Option<&str>,
    variant: Variant,
    opts: &EnrichOptions,
) -> InstructionRecord {
    let mut turns = Vec::with_capacity(2 * qas.len());
    for (t, qa) in qas.iter().enumerate() {
        let mut text = human_prompt(&qa.question, context, t, opts.placement);
        if t == 0 {
            text = format!("{}\n{text}", opts.image_token);
        }
        turns.push(ConversationTurn {
            speaker: Speaker::Human,
            text,
        });
        turns.push(ConversationTurn {
            speaker: Speaker::Assistant,
            text: qa.answer.clone(),
        });
    }
    InstructionRecord {
        image_id: image.image_id.clone(),
        image: image.image_path.clone(),
        turns,
        variant,
        template_version: TEMPLATE_VERSION.to_string(),
    }
}

pub fn build_basic(image: &ImageRecord, qas: &[QaRecord], opts: &EnrichOptions) -> Result<InstructionRecord> {
    check_qas(image, qas)?;
    Ok(assemble(image, qas, None, Variant::Basic, opts))
}

pub fn build_enhanced(
    image: &ImageRecord,
    qas: &[QaRecord],
    ctx: &ExpertContext,
    opts: &EnrichOptions,
) -> Result<InstructionRecord> {
    check_qas(image, qas)?;
    if ctx.source.image_id != image.image_id {
        return Err(Error::Contract(format!(
            "expert context rendered for image {} used with image {}",
            ctx.source.image_id, image.image_id
        )));
    }
    Ok(assemble(image, qas, Some(&ctx.text), Variant::Enhanced, opts))
}

/// Builds one record per image that has at least one QA, ordered by image_id.
/// QA order within an image follows input order.
pub fn build_dataset(
    images: &[ImageRecord],
    qas: &[QaRecord],
    experts: &[ExpertPrediction],
    variant: Variant,
    opts: &EnrichOptions,
) -> Result<Vec<InstructionRecord>> {
    let mut by_image: BTreeMap<&str, Vec<QaRecord>> = BTreeMap::new();
    for qa in qas {
        by_image.entry(qa.image_id.as_str()).or_default().push(qa.clone());
    }
    let images: BTreeMap<&str, &ImageRecord> = images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let experts: BTreeMap<&str, &ExpertPrediction> =
        experts.iter().map(|e| (e.image_id.as_str(), e)).collect();

    let mut out = Vec::with_capacity(by_image.len());
    for (image_id, group) in by_image {
        let image = images
            .get(image_id)
            .ok_or_else(|| Error::Contract(format!("QA references unknown image {image_id}")))?;
        let rec = match variant {
            Variant::Basic => build_basic(image, &group, opts)?,
            Variant::Enhanced => {
                let pred = experts
                    .get(image_id)
                    .ok_or_else(|| Error::Contract(format!("no expert prediction for image {image_id}")))?;
                let ctx = render_expert_context(pred, opts.threshold)?;
                build_enhanced(image, &group, &ctx, opts)?
            }
        };
        out.push(rec);
    }
    Ok(out)
}
