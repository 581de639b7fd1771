//! Structured visual information (SVI): the scene description that flows from
//! the extractor into the prompt compiler and the grounding metric.
//!
//! Documents are plain values. Equality is structural: two documents that
//! differ only in the order their lists were built in compare equal and
//! serialize to the same bytes.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Marker accepted (and ignored) as an extra top-level key when parsing.
pub const SCHEMA_MARKER: &str = "svi/1";

const TOP_LEVEL_KEYS: [&str; 8] = [
    "level",
    "objects",
    "relations",
    "lighting",
    "palette",
    "atmosphere",
    "implied_narrative",
    "source",
];

/// How much of the schema a document populates. `L1 < L2 < L3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GranularityLevel {
    /// Object names only.
    L1,
    /// Objects plus attributes and poses.
    L2,
    /// Everything.
    L3,
}

impl GranularityLevel {
    pub const ALL: [GranularityLevel; 3] = [Self::L1, Self::L2, Self::L3];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::L1 => "L1",
            Self::L2 => "L2",
            Self::L3 => "L3",
        }
    }
}

impl fmt::Display for GranularityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GranularityLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "L1" => Ok(Self::L1),
            "L2" => Ok(Self::L2),
            "L3" => Ok(Self::L3),
            other => Err(format!("unknown granularity level `{other}` (expected L1, L2 or L3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub name: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<String>,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

impl SceneObject {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            attributes: Vec::new(),
            pose: None,
            synonyms: Vec::new(),
        }
    }

    pub fn with_attributes<I, S>(mut self, attributes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.attributes = attributes.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_pose(mut self, pose: impl Into<String>) -> Self {
        self.pose = Some(pose.into());
        self
    }

    pub fn with_synonyms<I, S>(mut self, synonyms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.synonyms = synonyms.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialRelation {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl SpatialRelation {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }
}

/// Which extractor produced a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SviSource {
    Remote,
    Fixture,
    CaptionFallback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SviDocument {
    pub level: GranularityLevel,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub relations: Vec<SpatialRelation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lighting: Option<String>,
    #[serde(default)]
    pub palette: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atmosphere: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implied_narrative: Option<String>,
    pub source: SviSource,
}

impl SviDocument {
    /// An otherwise empty document holding `objects`.
    pub fn new(level: GranularityLevel, objects: Vec<SceneObject>, source: SviSource) -> Self {
        Self {
            level,
            objects,
            relations: Vec::new(),
            lighting: None,
            palette: Vec::new(),
            atmosphere: None,
            implied_narrative: None,
            source,
        }
    }

    /// Sorts every list into canonical order in place.
    pub fn canonicalize(&mut self) {
        for object in &mut self.objects {
            object.attributes.sort();
            object.synonyms.sort();
        }
        self.objects.sort();
        self.relations.sort();
        self.palette.sort();
    }

    pub fn canonicalized(&self) -> Self {
        let mut doc = self.clone();
        doc.canonicalize();
        doc
    }

    pub fn object(&self, name: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.name == name)
    }

    /// Facets that carry content in this document.
    pub fn present_facets(&self) -> Vec<Facet> {
        Facet::ALL
            .into_iter()
            .filter(|facet| match facet {
                Facet::Objects => !self.objects.is_empty(),
                Facet::Relations => !self.relations.is_empty(),
                Facet::Lighting => self.lighting.is_some(),
                Facet::Palette => !self.palette.is_empty(),
                Facet::Atmosphere => self.atmosphere.is_some(),
                Facet::Narrative => self.implied_narrative.is_some(),
            })
            .collect()
    }
}

impl PartialEq for SviDocument {
    fn eq(&self, other: &Self) -> bool {
        let a = self.canonicalized();
        let b = other.canonicalized();
        a.level == b.level
            && a.objects == b.objects
            && a.relations == b.relations
            && a.lighting == b.lighting
            && a.palette == b.palette
            && a.atmosphere == b.atmosphere
            && a.implied_narrative == b.implied_narrative
            && a.source == b.source
    }
}

impl Eq for SviDocument {}

/// One top-level category of visual information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Facet {
    Objects,
    Relations,
    Lighting,
    Palette,
    Atmosphere,
    Narrative,
}

impl Facet {
    /// All facets, ordered by name.
    pub const ALL: [Facet; 6] = [
        Self::Atmosphere,
        Self::Lighting,
        Self::Narrative,
        Self::Objects,
        Self::Palette,
        Self::Relations,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Objects => "objects",
            Self::Relations => "relations",
            Self::Lighting => "lighting",
            Self::Palette => "palette",
            Self::Atmosphere => "atmosphere",
            Self::Narrative => "narrative",
        }
    }
}

impl PartialOrd for Facet {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Facet {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.name().cmp(other.name())
    }
}

impl fmt::Display for Facet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Facet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Facet::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown facet `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_rule(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Error)]
pub enum SviError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("semantic error: {0}")]
    Semantic(ValidationReport),
    #[error("invalid document: {0}")]
    Invalid(ValidationReport),
    #[error("cannot upgrade granularity from {from} to {to}")]
    CannotUpgrade {
        from: GranularityLevel,
        to: GranularityLevel,
    },
}

pub fn validate(doc: &SviDocument) -> ValidationReport {
    let mut out = Vec::new();
    let level = doc.level;

    if doc.objects.is_empty() {
        out.push(Violation::new("objects", "objects must be non-empty"));
    }

    let mut names = HashSet::new();
    for (i, object) in doc.objects.iter().enumerate() {
        let field = format!("objects[{i}]");
        if object.name.is_empty() {
            out.push(Violation::new(format!("{field}.name"), "name must be non-empty"));
        } else if object.name.chars().any(char::is_control) {
            out.push(Violation::new(
                format!("{field}.name"),
                "name contains control characters",
            ));
        }
        if !names.insert(object.name.as_str()) {
            out.push(Violation::new(format!("{field}.name"), "duplicate object name"));
        }

        let mut folded = HashSet::new();
        for attr in &object.attributes {
            if attr.trim().is_empty() {
                out.push(Violation::new(
                    format!("{field}.attributes"),
                    "attribute must be non-empty",
                ));
            }
            if !folded.insert(attr.to_lowercase()) {
                out.push(Violation::new(
                    format!("{field}.attributes"),
                    "duplicate attribute",
                ));
            }
        }

        if level == GranularityLevel::L1 {
            if !object.attributes.is_empty() {
                out.push(Violation::new(format!("{field}.attributes"), "L1 forbids attributes"));
            }
            if object.pose.is_some() {
                out.push(Violation::new(format!("{field}.pose"), "L1 forbids pose"));
            }
        }
    }

    if level < GranularityLevel::L3 {
        let forbid = |name: &str| format!("{level} forbids {name}");
        if !doc.relations.is_empty() {
            out.push(Violation::new("relations", forbid("relations")));
        }
        if doc.lighting.is_some() {
            out.push(Violation::new("lighting", forbid("lighting")));
        }
        if !doc.palette.is_empty() {
            out.push(Violation::new("palette", forbid("palette")));
        }
        if doc.atmosphere.is_some() {
            out.push(Violation::new("atmosphere", forbid("atmosphere")));
        }
        if doc.implied_narrative.is_some() {
            out.push(Violation::new("implied_narrative", forbid("implied_narrative")));
        }
    }

    for (i, rel) in doc.relations.iter().enumerate() {
        if rel.predicate.trim().is_empty() {
            out.push(Violation::new(
                format!("relations[{i}].predicate"),
                "predicate must be non-empty",
            ));
        }
        for (end, name) in [("subject", &rel.subject), ("object", &rel.object)] {
            if !names.contains(name.as_str()) {
                out.push(Violation::new(
                    format!("relations[{i}].{end}"),
                    "unresolved relation endpoint",
                ));
            }
        }
    }

    ValidationReport { violations: out }
}

/// Compact JSON with fixed key order and sorted lists.
pub fn serialize_canonical(doc: &SviDocument) -> Result<String, SviError> {
    let report = validate(doc);
    if !report.is_ok() {
        return Err(SviError::Invalid(report));
    }
    let doc = doc.canonicalized();
    Ok(serde_json::to_string(&doc).expect("SVI documents always serialize"))
}

pub fn parse(text: &str) -> Result<SviDocument, SviError> {
    let value: Value = serde_json::from_str(text).map_err(|e| SviError::Syntax {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let doc = decode_value(value)?;
    let report = validate(&doc);
    if !report.is_ok() {
        return Err(SviError::Semantic(report));
    }
    Ok(doc)
}

/// Decodes a JSON value under the closed schema without checking level
/// invariants. Returned documents are canonicalized.
pub(crate) fn decode_value(mut value: Value) -> Result<SviDocument, SviError> {
    let semantic = |field: &str, rule: String| {
        SviError::Semantic(ValidationReport {
            violations: vec![Violation::new(field, rule)],
        })
    };
    let Some(map) = value.as_object_mut() else {
        return Err(semantic("document", "document must be a JSON object".into()));
    };

    if let Some(marker) = map.remove("schema") {
        if marker.as_str() != Some(SCHEMA_MARKER) {
            return Err(semantic("schema", format!("unsupported schema marker {marker}")));
        }
    }
    let unknown: Vec<Violation> = map
        .keys()
        .filter(|k| !TOP_LEVEL_KEYS.contains(&k.as_str()))
        .map(|k| Violation::new(k.clone(), "unknown key"))
        .collect();
    if !unknown.is_empty() {
        return Err(SviError::Semantic(ValidationReport { violations: unknown }));
    }

    let mut doc: SviDocument =
        serde_json::from_value(value).map_err(|e| semantic("document", e.to_string()))?;
    doc.canonicalize();
    Ok(doc)
}

/// Drops keys outside the schema (top level, objects and relations).
pub(crate) fn strip_unknown_keys(value: &mut Value) {
    let Some(map) = value.as_object_mut() else {
        return;
    };
    map.retain(|k, _| TOP_LEVEL_KEYS.contains(&k.as_str()) || k == "schema");
    if let Some(Value::Array(objects)) = map.get_mut("objects") {
        for object in objects.iter_mut().filter_map(Value::as_object_mut) {
            object.retain(|k, _| matches!(k.as_str(), "name" | "attributes" | "pose" | "synonyms"));
        }
    }
    if let Some(Value::Array(relations)) = map.get_mut("relations") {
        for rel in relations.iter_mut().filter_map(Value::as_object_mut) {
            rel.retain(|k, _| matches!(k.as_str(), "subject" | "predicate" | "object"));
        }
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Projects `doc` down to `target`. Object names and synonyms survive intact.
pub fn downgrade(doc: &SviDocument, target: GranularityLevel) -> Result<SviDocument, SviError> {
    if target > doc.level {
        return Err(SviError::CannotUpgrade {
            from: doc.level,
            to: target,
        });
    }
    let mut out = doc.canonicalized();
    out.level = target;
    if target < GranularityLevel::L3 {
        out.relations.clear();
        out.lighting = None;
        out.palette.clear();
        out.atmosphere = None;
        out.implied_narrative = None;
    }
    if target < GranularityLevel::L2 {
        for object in &mut out.objects {
            object.attributes.clear();
            object.pose = None;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ElementTag {
    Object,
    Attribute { object: String },
    Relation,
    Lighting,
    Palette,
    Atmosphere,
}

/// A surface string the generated text is expected to reflect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SalientElement {
    pub surface: String,
    pub synonyms: Vec<String>,
    pub tag: ElementTag,
}

impl SalientElement {
    fn plain(surface: &str, tag: ElementTag) -> Self {
        Self {
            surface: surface.to_string(),
            synonyms: Vec::new(),
            tag,
        }
    }

    /// Surface string followed by its synonyms.
    pub fn forms(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.surface.as_str()).chain(self.synonyms.iter().map(String::as_str))
    }
}

/// Elements in canonical document order: each object followed by its
/// attributes, then relation predicates, lighting, palette and atmosphere.
pub fn salient_elements(doc: &SviDocument) -> Vec<SalientElement> {
    let doc = doc.canonicalized();
    let mut out = Vec::new();
    for object in &doc.objects {
        out.push(SalientElement {
            surface: object.name.clone(),
            synonyms: object.synonyms.clone(),
            tag: ElementTag::Object,
        });
        if doc.level >= GranularityLevel::L2 {
            for attr in &object.attributes {
                out.push(SalientElement::plain(
                    attr,
                    ElementTag::Attribute {
                        object: object.name.clone(),
                    },
                ));
            }
        }
    }
    if doc.level == GranularityLevel::L3 {
        for rel in &doc.relations {
            out.push(SalientElement::plain(&rel.predicate, ElementTag::Relation));
        }
        if let Some(lighting) = &doc.lighting {
            out.push(SalientElement::plain(lighting, ElementTag::Lighting));
        }
        for color in &doc.palette {
            out.push(SalientElement::plain(color, ElementTag::Palette));
        }
        if let Some(atmosphere) = &doc.atmosphere {
            out.push(SalientElement::plain(atmosphere, ElementTag::Atmosphere));
        }
    }
    out
}
