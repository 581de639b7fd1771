//! Prompt compilation: turns a scene document and a user instruction into a
//! sectioned, hashed prompt.
//!
//! The compiler runs three passes. Prioritization picks facet weights for the
//! inferred task, integration renders the weighted facets as fixed sentences
//! that quote every surface string verbatim, and contextualization spells out
//! the constraints parsed from the instruction. [`simple_concat`] is the
//! ablation arm that skips all three.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{parse_constraints, ConstraintSet, StyleLexicon};
use crate::svi::{
    salient_elements, serialize_canonical, validate, Facet, SviDocument,
    ValidationReport,
};
use crate::text::tokenize;

/// Facets below this weight are left out of the visual context.
pub const FACET_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("instruction text must be non-empty")]
    EmptyInstruction,
    #[error("invalid scene document: {0}")]
    InvalidDocument(ValidationReport),
    #[error("invalid weight table for {task}: {reason}")]
    InvalidWeights { task: TaskType, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskType {
    StoryGen,
    Poetry,
    AdCopyGen,
    Freeform,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [Self::StoryGen, Self::Poetry, Self::AdCopyGen, Self::Freeform];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::StoryGen => "StoryGen",
            Self::Poetry => "Poetry",
            Self::AdCopyGen => "AdCopyGen",
            Self::Freeform => "Freeform",
        }
    }

    /// The word the template backend echoes for this task.
    pub fn task_word(self) -> &'static str {
        match self {
            Self::StoryGen => "story",
            Self::Poetry => "poem",
            Self::AdCopyGen => "advertisement",
            Self::Freeform => "description",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown task type `{s}`"))
    }
}

const TASK_KEYWORDS: [(TaskType, &[&str]); 3] = [
    (TaskType::Poetry, &["poem", "poetry", "verse", "haiku", "sonnet"]),
    (TaskType::StoryGen, &["story", "narrative", "tale", "fiction"]),
    (TaskType::AdCopyGen, &["ad", "advert", "copy", "marketing", "slogan"]),
];

/// Keyword rules, first matching rule wins.
pub fn infer_task_type(text: &str) -> TaskType {
    let tokens = tokenize(text);
    TASK_KEYWORDS
        .iter()
        .find(|(_, words)| tokens.iter().any(|t| words.contains(&t.as_str())))
        .map_or(TaskType::Freeform, |(task, _)| *task)
}

fn audience_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\bfor\s+(?:an?\s+|the\s+)?((?:(?:young|adult|teen|teenage|older|busy|curious|new|first-time)\s+)?(?:children|kids|teenagers|teens|adults|readers|students|travell?ers|families|parents|professionals|beginners|seniors|tourists|customers|audiences?))\b",
        )
        .unwrap()
    })
}

/// The user's directive with its inferred task and parsed constraints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserInstruction {
    pub text: String,
    pub task: TaskType,
    pub constraints: ConstraintSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audience: Option<String>,
}

impl UserInstruction {
    pub fn parse(text: &str, lexicon: &StyleLexicon) -> Result<Self, PromptError> {
        if text.trim().is_empty() {
            return Err(PromptError::EmptyInstruction);
        }
        Ok(Self {
            text: text.to_string(),
            task: infer_task_type(text),
            constraints: parse_constraints(text, lexicon),
            audience: audience_pattern()
                .captures(text)
                .map(|c| c[1].to_lowercase()),
        })
    }

    pub fn with_task(mut self, task: TaskType) -> Self {
        self.task = task;
        self
    }

    fn check(&self) -> Result<(), PromptError> {
        if self.text.trim().is_empty() {
            Err(PromptError::EmptyInstruction)
        } else {
            Ok(())
        }
    }
}

/// Facet weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetWeights(pub BTreeMap<Facet, f64>);

impl FacetWeights {
    pub fn get(&self, facet: Facet) -> f64 {
        self.0.get(&facet).copied().unwrap_or(0.0)
    }

    pub fn sum(&self) -> f64 {
        self.0.values().sum()
    }

    /// Facets in descending weight order, ties broken by facet name.
    pub fn ranked(&self) -> Vec<(Facet, f64)> {
        let mut out: Vec<(Facet, f64)> = self.0.iter().map(|(f, w)| (*f, *w)).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Facets that clear [`FACET_THRESHOLD`].
    pub fn included(&self) -> Vec<Facet> {
        self.ranked()
            .into_iter()
            .filter(|(_, w)| *w >= FACET_THRESHOLD - 1e-12)
            .map(|(f, _)| f)
            .collect()
    }
}

fn table(entries: &[(Facet, f64)]) -> BTreeMap<Facet, f64> {
    entries.iter().copied().collect()
}

/// Per-task weight tables. Freeform is always uniform over present facets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightTables {
    #[serde(rename = "StoryGen")]
    pub story: BTreeMap<Facet, f64>,
    #[serde(rename = "Poetry")]
    pub poetry: BTreeMap<Facet, f64>,
    #[serde(rename = "AdCopyGen")]
    pub ad_copy: BTreeMap<Facet, f64>,
}

impl Default for WeightTables {
    fn default() -> Self {
        use Facet::*;
        Self {
            story: table(&[
                (Objects, 0.25),
                (Narrative, 0.25),
                (Relations, 0.20),
                (Atmosphere, 0.15),
                (Lighting, 0.10),
                (Palette, 0.05),
            ]),
            poetry: table(&[
                (Atmosphere, 0.30),
                (Lighting, 0.20),
                (Objects, 0.15),
                (Palette, 0.15),
                (Narrative, 0.10),
                (Relations, 0.10),
            ]),
            ad_copy: table(&[
                (Objects, 0.30),
                (Palette, 0.20),
                (Atmosphere, 0.20),
                (Narrative, 0.15),
                (Relations, 0.10),
                (Lighting, 0.05),
            ]),
        }
    }
}

impl WeightTables {
    pub fn for_task(&self, task: TaskType) -> Option<&BTreeMap<Facet, f64>> {
        match task {
            TaskType::StoryGen => Some(&self.story),
            TaskType::Poetry => Some(&self.poetry),
            TaskType::AdCopyGen => Some(&self.ad_copy),
            TaskType::Freeform => None,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for task in [TaskType::StoryGen, TaskType::Poetry, TaskType::AdCopyGen] {
            let t = self.for_task(task).unwrap();
            if t.values().any(|w| !w.is_finite() || *w < 0.0 || *w > 1.0) {
                return Err(PromptError::InvalidWeights {
                    task,
                    reason: "weights must lie in [0, 1]".into(),
                });
            }
            let sum: f64 = t.values().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(PromptError::InvalidWeights {
                    task,
                    reason: format!("weights sum to {sum}, not 1"),
                });
            }
        }
        Ok(())
    }
}

/// Per-task text plus the facet sentence templates. Placeholders are
/// `{items}`, `{value}`, and `{subject}`/`{predicate}`/`{object}` for relations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplates {
    pub preambles: BTreeMap<TaskType, String>,
    pub style_hints: BTreeMap<TaskType, String>,
    pub objects: String,
    pub relation: String,
    pub lighting: String,
    pub palette: String,
    pub atmosphere: String,
    pub narrative: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        use TaskType::*;
        let map = |entries: [(TaskType, &str); 4]| {
            entries
                .into_iter()
                .map(|(t, s)| (t, s.to_string()))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            preambles: map([
                (StoryGen, "You are a storyteller. Write a story grounded in the visual details below, weaving the scene's objects, relations and mood into the narrative."),
                (Poetry, "You are a poet. Write a poem grounded in the visual details below, letting the atmosphere and lighting of the scene carry its emotional tone."),
                (AdCopyGen, "You are a copywriter. Write an advertisement grounded in the visual details below, highlighting the featured objects and their appeal."),
                (Freeform, "You are a descriptive writer. Respond to the instruction using the visual details below."),
            ]),
            style_hints: map([
                (StoryGen, "Tell a coherent narrative with a clear arc and concrete sensory detail."),
                (Poetry, "Use vivid imagery, evocative metaphors and a lyrical rhythm."),
                (AdCopyGen, "Keep the copy concise, persuasive and focused on what is pictured."),
                (Freeform, "Write clearly and stay faithful to the visual details."),
            ]),
            objects: "Visible in the scene: {items}.".into(),
            relation: "The {subject} is {predicate} the {object}.".into(),
            lighting: "The lighting is {value}.".into(),
            palette: "The color palette includes {items}.".into(),
            atmosphere: "The atmosphere conveys {value}.".into(),
            narrative: "Implied narrative: {value}.".into(),
        }
    }
}

/// Everything the compiler can be configured with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub weights: WeightTables,
    pub templates: PromptTemplates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionTag {
    Preamble,
    VisualContext,
    Directive,
    Constraints,
}

impl SectionTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Preamble => "preamble",
            Self::VisualContext => "visual_context",
            Self::Directive => "directive",
            Self::Constraints => "constraints",
        }
    }
}

/// A compiled prompt. `surfaces`, `keywords` and `task_word` record what the
/// sections were built from; they do not feed the hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OptimizedPrompt {
    pub sections: Vec<(SectionTag, String)>,
    pub prompt_hash: String,
    pub surfaces: Vec<String>,
    pub keywords: Vec<String>,
    pub task_word: Option<String>,
}

impl OptimizedPrompt {
    fn assemble(
        sections: Vec<(SectionTag, String)>,
        surfaces: Vec<String>,
        keywords: Vec<String>,
        task_word: Option<String>,
    ) -> Self {
        let prompt_hash = hash_sections(&sections);
        Self {
            sections,
            prompt_hash,
            surfaces,
            keywords,
            task_word,
        }
    }

    pub fn section(&self, tag: SectionTag) -> Option<&str> {
        self.sections
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, s)| s.as_str())
    }

    /// All sections joined by blank lines.
    pub fn render(&self) -> String {
        self.sections
            .iter()
            .map(|(_, s)| s.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

pub fn hash_sections(sections: &[(SectionTag, String)]) -> String {
    let mut hasher = Sha256::new();
    for (tag, text) in sections {
        hasher.update(tag.as_str().as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

fn check_doc(doc: &SviDocument) -> Result<(), PromptError> {
    let report = validate(doc);
    if report.is_ok() {
        Ok(())
    } else {
        Err(PromptError::InvalidDocument(report))
    }
}

/// The task's weight table restricted to facets present in `doc`,
/// renormalized to sum to one.
pub fn prioritize(doc: &SviDocument, task: TaskType, tables: &WeightTables) -> FacetWeights {
    let present = doc.present_facets();
    let raw: BTreeMap<Facet, f64> = match tables.for_task(task) {
        Some(t) => present.iter().map(|f| (*f, t.get(f).copied().unwrap_or(0.0))).collect(),
        None => present.iter().map(|f| (*f, 1.0)).collect(),
    };
    let total: f64 = raw.values().sum();
    let weights = if total > 0.0 {
        raw.into_iter().map(|(f, w)| (f, w / total)).collect()
    } else {
        let n = present.len() as f64;
        present.into_iter().map(|f| (f, 1.0 / n)).collect()
    };
    FacetWeights(weights)
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in pairs {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Renders the facets clearing the threshold, heaviest first. Returns the
/// text and the salient surface strings it quotes.
pub fn integrate(
    doc: &SviDocument,
    weights: &FacetWeights,
    templates: &PromptTemplates,
) -> (String, Vec<String>) {
    let doc = doc.canonicalized();
    let mut lines = Vec::new();
    let mut surfaces = Vec::new();

    for facet in weights.included() {
        match facet {
            Facet::Objects => {
                let items: Vec<String> = doc
                    .objects
                    .iter()
                    .map(|o| {
                        let mut item = o.name.clone();
                        if !o.attributes.is_empty() {
                            item = format!("{item} ({})", o.attributes.join(", "));
                        }
                        if let Some(pose) = &o.pose {
                            item = format!("{item}, {pose}");
                        }
                        item
                    })
                    .collect();
                lines.push(fill(&templates.objects, &[("items", &items.join("; "))]));
            }
            Facet::Relations => {
                let sentences: Vec<String> = doc
                    .relations
                    .iter()
                    .map(|r| {
                        fill(
                            &templates.relation,
                            &[("subject", &r.subject), ("predicate", &r.predicate), ("object", &r.object)],
                        )
                    })
                    .collect();
                lines.push(sentences.join(" "));
            }
            Facet::Lighting => {
                if let Some(v) = &doc.lighting {
                    lines.push(fill(&templates.lighting, &[("value", v)]));
                }
            }
            Facet::Palette => {
                lines.push(fill(&templates.palette, &[("items", &doc.palette.join(", "))]));
            }
            Facet::Atmosphere => {
                if let Some(v) = &doc.atmosphere {
                    lines.push(fill(&templates.atmosphere, &[("value", v)]));
                }
            }
            Facet::Narrative => {
                if let Some(v) = &doc.implied_narrative {
                    lines.push(fill(&templates.narrative, &[("value", v)]));
                }
            }
        }
    }

    let text = lines.join("\n");
    for element in salient_elements(&doc) {
        if text.contains(&element.surface) && !surfaces.contains(&element.surface) {
            surfaces.push(element.surface);
        }
    }
    (text, surfaces)
}

/// Spells out the parsed constraints, or the task's style hint when there
/// are none.
pub fn contextualize(instr: &UserInstruction, templates: &PromptTemplates) -> String {
    let c = &instr.constraints;
    let mut lines = Vec::new();
    if !c.style_keywords.is_empty() {
        lines.push(format!("Adopt a {} style.", c.style_keywords.join(", ")));
    }
    if !c.theme_keywords.is_empty() {
        lines.push(format!("Develop the themes: {}.", c.theme_keywords.join(", ")));
    }
    match (c.min_words, c.max_words) {
        (Some(lo), Some(hi)) => lines.push(format!("Length: between {lo} and {hi} words.")),
        (Some(lo), None) => lines.push(format!("Length: at least {lo} words.")),
        (None, Some(hi)) => lines.push(format!("Length: at most {hi} words.")),
        (None, None) => {}
    }
    if let Some(n) = c.min_lines {
        lines.push(format!("Write at least {n} lines."));
    }
    if !c.forbidden_terms.is_empty() {
        lines.push(format!("Do not mention: {}.", c.forbidden_terms.join(", ")));
    }
    if lines.is_empty() {
        if let Some(hint) = templates.style_hints.get(&instr.task) {
            lines.push(hint.clone());
        }
    }
    if let Some(audience) = &instr.audience {
        lines.push(format!("Write for {audience}."));
    }
    if lines.is_empty() {
        return String::new();
    }
    format!("Constraints:\n{}", lines.join("\n"))
}

/// Full compilation: preamble, integrated visual context, the instruction
/// verbatim, and the constraint paragraph.
pub fn compile(
    doc: &SviDocument,
    instr: &UserInstruction,
    config: &PromptConfig,
) -> Result<OptimizedPrompt, PromptError> {
    check_doc(doc)?;
    instr.check()?;
    let weights = prioritize(doc, instr.task, &config.weights);
    let (visual, surfaces) = integrate(doc, &weights, &config.templates);
    let preamble = config
        .templates
        .preambles
        .get(&instr.task)
        .cloned()
        .unwrap_or_default();
    let sections = vec![
        (SectionTag::Preamble, preamble),
        (SectionTag::VisualContext, visual),
        (SectionTag::Directive, instr.text.clone()),
        (SectionTag::Constraints, contextualize(instr, &config.templates)),
    ];
    let keywords = instr.constraints.keywords().map(str::to_string).collect();
    Ok(OptimizedPrompt::assemble(
        sections,
        surfaces,
        keywords,
        Some(instr.task.task_word().to_string()),
    ))
}

/// Ablation arm: canonical SVI text followed by the instruction, nothing else.
pub fn simple_concat(doc: &SviDocument, instr: &UserInstruction) -> Result<OptimizedPrompt, PromptError> {
    instr.check()?;
    let visual = serialize_canonical(doc).map_err(|_| PromptError::InvalidDocument(validate(doc)))?;
    let surfaces = {
        let mut seen = Vec::new();
        for e in salient_elements(doc) {
            if visual.contains(&e.surface) && !seen.contains(&e.surface) {
                seen.push(e.surface);
            }
        }
        seen
    };
    let sections = vec![
        (SectionTag::VisualContext, visual),
        (SectionTag::Directive, instr.text.clone()),
    ];
    Ok(OptimizedPrompt::assemble(sections, surfaces, Vec::new(), None))
}
