//! Strategies and property checks shared by the integration tests and the
//! acceptance target.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use visucraft::metrics::{
    creativity, instruction_adherence, visual_grounding, ConstraintSet, CreativityWeights, MetricScores,
    ReferenceCorpus, StyleLexicon,
};
use visucraft::prompt::{compile, prioritize, PromptConfig, SectionTag, TaskType, UserInstruction, FACET_THRESHOLD};
use visucraft::svi::{
    downgrade, parse, salient_elements, serialize_canonical, validate, Facet, GranularityLevel, SceneObject,
    SpatialRelation, SviDocument, SviSource,
};

pub fn sample_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample")
}

pub fn fixture_paths() -> Vec<PathBuf> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(sample_dir().join("fixtures"))
        .expect("bundled fixtures exist")
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".svi.json"))
        .collect();
    paths.sort();
    paths
}

/// Runner with a fixed seed so every run explores the same cases.
pub fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- strategies

const NOUNS: &[&str] = &[
    "tree", "boat", "cliff", "sea", "sky", "lighthouse", "figure", "dog", "house", "bridge", "moon", "river",
    "lamp", "chair", "window", "road", "bird", "mountain", "café", "garden",
];
const ADJECTIVES: &[&str] = &[
    "tall", "grey", "rocky", "stormy", "red", "ancient", "quiet", "bright", "broken", "wooden", "misty",
    "golden", "tiny", "distant", "faint glow",
];
const PREDICATES: &[&str] = &["on", "beside", "above", "overlooking", "behind", "standing on", "under"];
const SCENE_WORDS: &[&str] = &[
    "twilight", "dawn light", "neon haze", "slate grey", "deep indigo", "amber", "isolation", "calm",
    "longing", "a journey home", "a storm approaching",
];

pub fn arb_level() -> impl Strategy<Value = GranularityLevel> {
    prop::sample::select(GranularityLevel::ALL.to_vec())
}

/// Free-form names: pool words or arbitrary printable strings, including
/// non-ASCII and JSON-significant characters.
fn arb_name() -> impl Strategy<Value = String> {
    prop_oneof![
        3 => prop::sample::select(NOUNS).prop_map(str::to_string),
        1 => "[a-zA-Zé\"\\\\/ ]{1,12}",
    ]
}

fn arb_attribute() -> impl Strategy<Value = String> {
    prop_oneof![
        3 => prop::sample::select(ADJECTIVES).prop_map(str::to_string),
        1 => "[a-z][a-z ü-]{0,10}",
    ]
}

fn arb_scene_word() -> impl Strategy<Value = String> {
    prop_oneof![
        3 => prop::sample::select(SCENE_WORDS).prop_map(str::to_string),
        1 => "[a-z][a-z ,]{0,14}",
    ]
}

fn arb_object(name: String, level: GranularityLevel) -> BoxedStrategy<SceneObject> {
    let synonyms = prop::collection::vec(prop::sample::select(NOUNS).prop_map(str::to_string), 0..3);
    if level == GranularityLevel::L1 {
        return synonyms
            .prop_map(move |syn| SceneObject::named(name.clone()).with_synonyms(syn))
            .boxed();
    }
    let attributes = prop::collection::btree_set(arb_attribute(), 0..4);
    let pose = prop::option::of(prop::sample::select(vec!["standing", "sitting", "mid-stride", "leaning"]));
    (attributes, pose, synonyms)
        .prop_map(move |(attrs, pose, syn)| {
            let mut o = SceneObject::named(name.clone()).with_attributes(attrs).with_synonyms(syn);
            o.pose = pose.map(str::to_string);
            o
        })
        .boxed()
}

/// Valid documents at `level`.
pub fn arb_doc_at(level: GranularityLevel) -> BoxedStrategy<SviDocument> {
    prop::collection::btree_set(arb_name(), 1..6)
        .prop_flat_map(move |names: BTreeSet<String>| {
            let names: Vec<String> = names.into_iter().collect();
            let n = names.len();
            let objects: Vec<_> = names.iter().map(|nm| arb_object(nm.clone(), level)).collect();
            let l3 = level == GranularityLevel::L3;
            let relations = if l3 {
                prop::collection::vec((0..n, prop::sample::select(PREDICATES), 0..n), 0..4).boxed()
            } else {
                Just(Vec::new()).boxed()
            };
            let scene = if l3 {
                (
                    prop::option::of(arb_scene_word()),
                    prop::collection::vec(arb_scene_word(), 0..3),
                    prop::option::of(arb_scene_word()),
                    prop::option::of(arb_scene_word()),
                )
                    .boxed()
            } else {
                Just((None, Vec::new(), None, None)).boxed()
            };
            let source = prop::sample::select(vec![SviSource::Remote, SviSource::Fixture, SviSource::CaptionFallback]);
            (objects, relations, scene, source).prop_map(move |(objects, rels, scene, source)| {
                let mut doc = SviDocument::new(level, objects, source);
                doc.relations = rels
                    .into_iter()
                    .map(|(s, p, o)| SpatialRelation::new(names[s].clone(), p, names[o].clone()))
                    .collect();
                (doc.lighting, doc.palette, doc.atmosphere, doc.implied_narrative) = scene;
                doc
            })
        })
        .boxed()
}

pub fn arb_doc() -> impl Strategy<Value = SviDocument> {
    arb_level().prop_flat_map(arb_doc_at)
}

pub fn arb_l3_doc() -> BoxedStrategy<SviDocument> {
    arb_doc_at(GranularityLevel::L3)
}

/// Instructions assembled from the phrasings the constraint parser knows,
/// plus arbitrary free text.
pub fn arb_instruction() -> impl Strategy<Value = String> {
    let structured = (
        prop::sample::select(vec!["Write", "Compose", "Create", "Tell"]),
        prop::option::of(prop::sample::select(vec!["melancholic", "humorous", "hopeful", "serene", "persuasive"])),
        prop::sample::select(vec!["poem", "story", "ad copy", "slogan", "piece", "haiku"]),
        prop::option::of(prop::sample::select(vec!["isolation and light", "the sea", "a lost friend", "home"])),
        any::<bool>(),
        prop::option::of(prop::sample::select(vec![
            " in at least 4 lines",
            ", between 20 and 80 words",
            ", at most 50 words",
        ])),
        prop::option::of(prop::sample::select(vec!["rain", "money"])),
    )
        .prop_map(|(verb, style, noun, about, inspired, length, forbid)| {
            let mut s = format!("{verb} a");
            if let Some(style) = style {
                s.push(' ');
                s.push_str(style);
            }
            s.push(' ');
            s.push_str(noun);
            if let Some(about) = about {
                s.push_str(" about ");
                s.push_str(about);
            }
            if inspired {
                s.push_str(", inspired by this scene");
            }
            if let Some(length) = length {
                s.push_str(length);
            }
            if let Some(term) = forbid {
                s.push_str(", without mentioning ");
                s.push_str(term);
            }
            s.push('.');
            s
        });
    prop_oneof![3 => structured, 1 => "[A-Za-z][A-Za-z0-9 ,.!?'é]{0,60}"]
}

/// Texts drawn mostly from scene vocabulary so grounding is non-trivial.
pub fn arb_text() -> impl Strategy<Value = String> {
    let word = prop_oneof![
        prop::sample::select(NOUNS).prop_map(str::to_string),
        prop::sample::select(ADJECTIVES).prop_map(str::to_string),
        prop::sample::select(SCENE_WORDS).prop_map(str::to_string),
        "[a-z]{1,8}",
    ];
    let sep = prop::sample::select(vec![" ", " ", ", ", ".\n", "\n"]);
    prop::collection::vec((word, sep), 0..40).prop_map(|parts| parts.into_iter().map(|(w, s)| w + s).collect())
}

pub fn arb_nonempty_text() -> impl Strategy<Value = String> {
    arb_text().prop_map(|t| format!("{t} word"))
}

// ---------------------------------------------------------------- checks

/// (label, vg, c, ia, reported mean) for every row of the three result tables.
pub const REPORTED_ROWS: &[(&str, f64, f64, f64, f64)] = &[
    ("Table 2: LVLM-Base - StoryGen", 0.789, 0.752, 0.801, 0.781),
    ("Table 2: LVLM-Base - Poetry", 0.771, 0.765, 0.780, 0.772),
    ("Table 2: LVLM-Enhanced - StoryGen", 0.812, 0.795, 0.825, 0.811),
    ("Table 2: LVLM-Enhanced - Poetry", 0.798, 0.780, 0.805, 0.794),
    ("Table 2: VisuCraft - StoryGen", 0.825, 0.810, 0.830, 0.822),
    ("Table 2: VisuCraft - Poetry", 0.810, 0.805, 0.815, 0.810),
    ("Table 2: VisuCraft - AdCopyGen", 0.799, 0.790, 0.820, 0.803),
    ("Table 3: w/o E", 0.801, 0.785, 0.805, 0.797),
    ("Table 3: w/o G", 0.815, 0.798, 0.820, 0.811),
    ("Table 3: Full", 0.825, 0.810, 0.830, 0.822),
    ("Table 4: Level 1", 0.775, 0.748, 0.785, 0.769),
    ("Table 4: Level 2", 0.803, 0.787, 0.810, 0.800),
    ("Table 4: Level 3", 0.825, 0.810, 0.830, 0.822),
];

pub fn check_mean_golden() -> Result<(), String> {
    for (label, vg, c, ia, reported) in REPORTED_ROWS {
        let mean = MetricScores::new(*vg, *c, *ia).mean;
        if (mean - reported).abs() > 0.0005 {
            return Err(format!("{label}: recomputed mean {mean:.6} vs reported {reported}"));
        }
    }
    Ok(())
}

pub fn check_svi_roundtrip(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(arb_doc(), any::<u64>()), |(doc, seed)| {
            let bytes = serialize_canonical(&doc).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let back = parse(&bytes).map_err(|e| TestCaseError::fail(format!("{e}: {bytes}")))?;
            prop_assert_eq!(&back, &doc);
            let again = serialize_canonical(&back).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(&again, &bytes);

            // Construction order must not leak into the bytes.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = doc.clone();
            shuffled.objects.shuffle(&mut rng);
            for o in &mut shuffled.objects {
                o.attributes.shuffle(&mut rng);
                o.synonyms.shuffle(&mut rng);
            }
            shuffled.relations.shuffle(&mut rng);
            shuffled.palette.shuffle(&mut rng);
            let permuted = serialize_canonical(&shuffled).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(permuted, bytes);
            Ok(())
        })
        .map_err(fail)
}

/// Idempotence, element-count monotonicity and validity of every
/// projection of `doc`.
pub fn downgrade_laws(doc: &SviDocument) -> Result<(), String> {
    let doc = &doc.canonicalized();
    let mut last_count = 0;
    for level in GranularityLevel::ALL.into_iter().filter(|l| *l <= doc.level) {
        let once = downgrade(doc, level).map_err(fail)?;
        let twice = downgrade(&once, level).map_err(fail)?;
        if once != twice {
            return Err(format!("downgrade to {level} is not idempotent"));
        }
        let report = validate(&once);
        if !report.is_ok() {
            return Err(format!("downgrade to {level} is invalid: {report}"));
        }
        let names: Vec<_> = once.objects.iter().map(|o| (&o.name, &o.synonyms)).collect();
        let source: Vec<_> = doc.objects.iter().map(|o| (&o.name, &o.synonyms)).collect();
        if names != source {
            return Err(format!("downgrade to {level} changed object names or synonyms"));
        }
        let count = salient_elements(&once).len();
        if count < last_count {
            return Err(format!("salient element count fell to {count} at {level}"));
        }
        last_count = count;
    }
    if doc.level < GranularityLevel::L3 && downgrade(doc, GranularityLevel::L3).is_ok() {
        return Err("upgrade was accepted".into());
    }
    Ok(())
}

pub fn check_downgrade_fixtures() -> Result<(), String> {
    use visucraft::extractor::{Extractor, ExtractorConfig};
    use visucraft::ImageRef;

    let paths = fixture_paths();
    if paths.len() != 10 {
        return Err(format!("expected 10 bundled fixtures, found {}", paths.len()));
    }
    let extractor = Extractor::new(ExtractorConfig::fixture(sample_dir().join("fixtures"), GranularityLevel::L3))
        .map_err(fail)?;
    for path in paths {
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let id = name.trim_end_matches(".svi.json");
        let text = std::fs::read_to_string(&path).map_err(fail)?;
        let doc = parse(&text).map_err(|e| format!("{name}: {e}"))?;
        if serialize_canonical(&doc).map_err(fail)? != text {
            return Err(format!("{name} is not in canonical form"));
        }
        downgrade_laws(&doc).map_err(|e| format!("{name}: {e}"))?;

        let image = ImageRef::new(id, format!("images/{id}.jpg"));
        let full = extractor.extract_at(&image, GranularityLevel::L3).map_err(fail)?;
        for level in GranularityLevel::ALL {
            let direct = extractor.extract_at(&image, level).map_err(fail)?;
            let projected = downgrade(&full, level).map_err(fail)?;
            let a = serialize_canonical(&direct).map_err(fail)?;
            if a != serialize_canonical(&projected).map_err(fail)? {
                return Err(format!("{name}: extract at {level} differs from downgrade of extract at L3"));
            }
            let again = serialize_canonical(&extractor.extract_at(&image, level).map_err(fail)?).map_err(fail)?;
            if a != again {
                return Err(format!("{name}: fixture extraction is not deterministic"));
            }
        }
    }
    Ok(())
}

pub fn check_downgrade_random(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&arb_l3_doc(), |doc| downgrade_laws(&doc).map_err(TestCaseError::fail))
        .map_err(fail)
}

/// Every facet clearing the threshold must have its surface strings quoted.
fn facet_surfaces(doc: &SviDocument, facet: Facet) -> Vec<String> {
    match facet {
        Facet::Objects => doc.objects.iter().map(|o| o.name.clone()).collect(),
        Facet::Relations => doc.relations.iter().map(|r| r.predicate.clone()).collect(),
        Facet::Lighting => doc.lighting.iter().cloned().collect(),
        Facet::Palette => doc.palette.clone(),
        Facet::Atmosphere => doc.atmosphere.iter().cloned().collect(),
        Facet::Narrative => doc.implied_narrative.iter().cloned().collect(),
    }
}

pub fn check_prompt_contract(cases: u32) -> Result<(), String> {
    let config = PromptConfig::default();
    let lexicon = StyleLexicon::bundled();
    let task = prop::sample::select(TaskType::ALL.to_vec());
    runner(cases)
        .run(&(arb_doc(), arb_instruction(), task), |(doc, text, task)| {
            let instr = UserInstruction::parse(&text, lexicon)
                .map_err(|e| TestCaseError::fail(e.to_string()))?
                .with_task(task);
            let prompt = compile(&doc, &instr, &config).map_err(|e| TestCaseError::fail(e.to_string()))?;

            prop_assert_eq!(prompt.section(SectionTag::Directive), Some(text.as_str()));
            prop_assert!(prompt.render().contains(&text), "directive is not a substring of the rendered prompt");

            let weights = prioritize(&doc, task, &config.weights);
            prop_assert!((weights.sum() - 1.0).abs() <= 1e-9, "weights sum to {}", weights.sum());
            let present = doc.present_facets();
            for (facet, w) in &weights.0 {
                prop_assert!(*w >= 0.0);
                prop_assert!(present.contains(facet), "weight on absent facet {:?}", facet);
            }

            let visual = prompt.section(SectionTag::VisualContext).unwrap_or("");
            for facet in present {
                if weights.get(facet) >= FACET_THRESHOLD {
                    for surface in facet_surfaces(&doc, facet) {
                        prop_assert!(
                            visual.contains(&surface),
                            "facet {:?} surface {:?} missing from visual context", facet, surface
                        );
                    }
                }
            }

            let again = compile(&doc, &instr, &config).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(&again.prompt_hash, &prompt.prompt_hash);
            prop_assert_eq!(again.render(), prompt.render());
            Ok(())
        })
        .map_err(fail)
}

fn approx(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

pub fn check_metric_suite(cases: u32, append_cases: u32) -> Result<(), String> {
    let lexicon = StyleLexicon::bundled();
    let weights = CreativityWeights::default();
    let empty = ReferenceCorpus::default();

    // Grounding: lighthouse, cliff, twilight matched; grey sea not.
    let mut coast = SviDocument::new(
        GranularityLevel::L3,
        vec![
            SceneObject::named("lighthouse"),
            SceneObject::named("cliff"),
            SceneObject::named("grey sea"),
        ],
        SviSource::Fixture,
    );
    coast.lighting = Some("twilight".into());
    let vg = visual_grounding("A lighthouse stood on the cliff at twilight, above a blue sea.", &coast);
    if !approx(vg, 0.75) {
        return Err(format!("VG case: expected 0.75, got {vg}"));
    }

    // D2 = 1/3, TTR = 1/4, O4 = 0.
    let oracle = 0.4 * (1.0 / 3.0) + 0.3 * 0.25 + 0.3 * 1.0;
    let c = creativity("la la la la", &empty, &weights).map_err(fail)?;
    if !approx(c, oracle) {
        return Err(format!("C case: expected {oracle}, got {c}"));
    }

    let ia = instruction_adherence("anything at all", &ConstraintSet::default(), lexicon);
    if ia != 1.0 {
        return Err(format!("vacuous IA: expected 1.0, got {ia}"));
    }

    let corpus = ReferenceCorpus::from_documents(["the sea was grey and the wind came off it", "a lone tree by a river"]);
    runner(cases)
        .run(&(arb_doc(), arb_nonempty_text(), arb_instruction()), |(doc, text, instruction)| {
            let cs = visucraft::metrics::parse_constraints(&instruction, lexicon);
            let vg = visual_grounding(&text, &doc);
            let c = creativity(&text, &corpus, &weights).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let ia = instruction_adherence(&text, &cs, lexicon);
            let s = MetricScores::new(vg, c, ia);
            for (name, v) in [("vg", s.vg), ("c", s.c), ("ia", s.ia), ("mean", s.mean)] {
                prop_assert!((0.0..=1.0).contains(&v), "{} = {} out of range", name, v);
            }
            prop_assert_eq!(visual_grounding(&text, &doc), vg);
            Ok(())
        })
        .map_err(fail)?;

    runner(append_cases)
        .run(&(arb_doc(), arb_text(), arb_text()), |(doc, text, tail)| {
            let before = visual_grounding(&text, &doc);
            let after = visual_grounding(&format!("{text} {tail}"), &doc);
            prop_assert!(after >= before, "appending lowered VG from {} to {}", before, after);
            Ok(())
        })
        .map_err(fail)
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_visucraft")
}

fn mean_vg(table: &visucraft::harness::ReportTable) -> Vec<f64> {
    table.rows.iter().map(|r| r.vg).collect()
}

/// Runs the bundled manifest under every arm and level into `out`.
pub fn run_sample_suite(out: &Path) -> Result<visucraft::harness::SuiteOutcome, String> {
    use visucraft::harness::{load_manifest, run_suite, PipelineArm, RunConfig};
    let mut cfg = RunConfig::load(&sample_dir().join("run.toml")).map_err(fail)?;
    cfg.output_dir = out.to_path_buf();
    let entries = load_manifest(&sample_dir().join("manifest.jsonl")).map_err(fail)?;
    let arms = [PipelineArm::Full, PipelineArm::WithoutExtractor, PipelineArm::WithoutPromptgen];
    run_suite(&entries, &cfg, &arms, &GranularityLevel::ALL).map_err(fail)
}

pub fn check_offline_ordering() -> Result<(), String> {
    use visucraft::harness::{emit_report, load_records, ReportShape};

    let first = tempfile::tempdir().map_err(fail)?;
    let second = tempfile::tempdir().map_err(fail)?;
    let outcome = run_sample_suite(first.path())?;
    if outcome.failed() > 0 {
        let errors: Vec<_> = outcome.records.iter().filter_map(|r| r.error.clone()).collect();
        return Err(format!("{} cell(s) failed: {errors:?}", outcome.failed()));
    }
    if outcome.records.len() != 90 {
        return Err(format!("expected 90 records, got {}", outcome.records.len()));
    }

    let table4 = &outcome.reports[2];
    let vg = mean_vg(table4);
    if table4.shape != ReportShape::Table4 || vg.len() != 3 {
        return Err(format!("unexpected table4 shape: {table4:?}"));
    }
    if !(vg[0] <= vg[1] && vg[1] <= vg[2]) {
        return Err(format!("granularity ordering violated: L1 {:.4}, L2 {:.4}, L3 {:.4}", vg[0], vg[1], vg[2]));
    }
    let table3 = &outcome.reports[1];
    let vg = mean_vg(table3);
    if table3.shape != ReportShape::Table3 || vg.len() != 3 {
        return Err(format!("unexpected table3 shape: {table3:?}"));
    }
    // Rows are w/o E, w/o G, Full.
    if !(vg[2] >= vg[1] && vg[1] >= vg[0]) {
        return Err(format!(
            "ablation ordering violated: full {:.4}, w/o G {:.4}, w/o E {:.4}",
            vg[2], vg[1], vg[0]
        ));
    }

    run_sample_suite(second.path())?;
    for shape in ["table2", "table3", "table4"] {
        for ext in ["txt", "csv", "json"] {
            let name = format!("report.{shape}.{ext}");
            let a = std::fs::read(first.path().join(&name)).map_err(fail)?;
            let b = std::fs::read(second.path().join(&name)).map_err(fail)?;
            if a != b {
                return Err(format!("{name} differs between two runs"));
            }
        }
    }

    let reloaded = load_records(first.path()).map_err(fail)?;
    for (i, shape) in ReportShape::ALL.into_iter().enumerate() {
        if emit_report(&reloaded, shape) != outcome.reports[i] {
            return Err(format!("{} differs after reloading records", shape.as_str()));
        }
    }
    Ok(())
}

pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn visucraft(args: &[&str]) -> CliOutput {
    let out = std::process::Command::new(bin())
        .args(args)
        .env_remove(visucraft::extractor::TOKEN_ENV)
        .env_remove(visucraft::backend::TOKEN_ENV)
        .output()
        .expect("binary runs");
    CliOutput {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn expect_code(what: &str, out: &CliOutput, code: i32) -> Result<(), String> {
    if out.code != code {
        return Err(format!(
            "{what}: exit {} (wanted {code})\nstdout: {}\nstderr: {}",
            out.code, out.stdout, out.stderr
        ));
    }
    Ok(())
}

pub fn check_cli() -> Result<(), String> {
    let sample = sample_dir();
    let manifest = sample.join("manifest.jsonl");
    let config = sample.join("run.toml");
    let tmp = tempfile::tempdir().map_err(fail)?;
    let out_dir = tmp.path().join("runs");
    let s = |p: &Path| p.to_string_lossy().into_owned();

    // run
    let run = visucraft(&[
        "run", "--manifest", &s(&manifest), "--config", &s(&config),
        "--arm", "full,wo-extractor,wo-promptgen", "--level", "L3",
        "--backend", "template", "--out", &s(&out_dir),
    ]);
    expect_code("run", &run, 0)?;
    let mut names: Vec<String> = std::fs::read_dir(&out_dir)
        .map_err(fail)?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".run.json"))
        .collect();
    names.sort();
    if names.len() != 30 {
        return Err(format!("expected 30 run records, found {}", names.len()));
    }
    for n in &names {
        let parts: Vec<&str> = n.split('.').collect();
        let ok = parts.len() == 5
            && ["full", "wo-extractor", "wo-promptgen"].contains(&parts[1])
            && parts[2] == "L3"
            && parts[3] == "run"
            && parts[4] == "json";
        if !ok {
            return Err(format!("bad record file name {n}"));
        }
    }
    if !names.contains(&"cliff-lighthouse.full.L3.run.json".to_string()) {
        return Err("missing cliff-lighthouse.full.L3.run.json".into());
    }

    // report
    let report = visucraft(&["report", "--records", &s(&out_dir), "--shape", "table3"]);
    expect_code("report", &report, 0)?;
    let rows = report.stdout.lines().filter(|l| l.starts_with("VisuCraft")).count();
    if rows != 3 {
        return Err(format!("table3 report has {rows} rows:\n{}", report.stdout));
    }
    let written = std::fs::read_to_string(out_dir.join("report.table3.txt")).map_err(fail)?;
    if written != report.stdout {
        return Err("report subcommand disagrees with the report written by run".into());
    }
    let csv = visucraft(&["report", "--records", &s(&out_dir), "--shape", "table4", "--format", "csv"]);
    expect_code("report csv", &csv, 0)?;
    if !csv.stdout.starts_with("label,vg,c,ia,mean") {
        return Err(format!("unexpected csv header: {}", csv.stdout));
    }

    // score
    let fixture = sample.join("fixtures/cliff-lighthouse.svi.json");
    let text = tmp.path().join("poem.txt");
    std::fs::write(&text, "A lone figure on the desolate cliff.\nThe grey sea churns below the sky.\n").map_err(fail)?;
    let scored = visucraft(&[
        "score", "--text", &s(&text), "--svi", &s(&fixture),
        "--instruction", "Write a melancholic poem about isolation",
    ]);
    expect_code("score", &scored, 0)?;
    let v: serde_json::Value = serde_json::from_str(scored.stdout.trim()).map_err(fail)?;
    let get = |k: &str| v[k].as_f64().ok_or_else(|| format!("score output lacks {k}: {}", scored.stdout));
    let (vg, c, ia, mean) = (get("vg")?, get("c")?, get("ia")?, get("mean")?);
    if (mean - (vg + c + ia) / 3.0).abs() > 1e-12 {
        return Err(format!("score mean {mean} is not the average of {vg}, {c}, {ia}"));
    }

    // exit 1: unscorable text, failed entry
    let empty = tmp.path().join("empty.txt");
    std::fs::write(&empty, " \n").map_err(fail)?;
    let unscorable = visucraft(&["score", "--text", &s(&empty), "--svi", &s(&fixture), "--instruction", "Write"]);
    expect_code("score on empty text", &unscorable, 1)?;

    let partial = tmp.path().join("partial.jsonl");
    let first_line = std::fs::read_to_string(&manifest).map_err(fail)?.lines().next().unwrap().to_string();
    let missing = r#"{"id":"no-such-image","image_uri":"x.jpg","caption":"a tree","instruction":"Write a poem","scenario":"Poetry"}"#;
    std::fs::write(&partial, format!("{first_line}\n{missing}\n")).map_err(fail)?;
    let partial_out = tmp.path().join("partial-runs");
    let failed = visucraft(&[
        "run", "--manifest", &s(&partial), "--config", &s(&config), "--out", &s(&partial_out),
    ]);
    expect_code("run with a missing fixture", &failed, 1)?;
    let record = partial_out.join("no-such-image.full.L3.run.json");
    let body = std::fs::read_to_string(&record).map_err(|e| format!("{}: {e}", record.display()))?;
    if !body.contains("\"failed\"") {
        return Err(format!("failed entry not recorded as failed: {body}"));
    }
    if !partial_out.join("cliff-lighthouse.full.L3.run.json").is_file() {
        return Err("successful entry missing next to the failed one".into());
    }

    // exit 2: configuration and usage errors
    let bad_config = tmp.path().join("bad.toml");
    std::fs::write(&bad_config, "parallelism = 0\n").map_err(fail)?;
    let bad_manifest = tmp.path().join("bad.jsonl");
    std::fs::write(&bad_manifest, "{\"id\": \"x\"\n").map_err(fail)?;
    let out = s(&tmp.path().join("unused"));
    let cases: Vec<(&str, Vec<String>)> = vec![
        ("unknown arm", vec!["run".into(), "--manifest".into(), s(&manifest), "--arm".into(), "nope".into(), "--out".into(), out.clone()]),
        ("unknown level", vec!["run".into(), "--manifest".into(), s(&manifest), "--level".into(), "L4".into(), "--out".into(), out.clone()]),
        ("unknown backend", vec!["run".into(), "--manifest".into(), s(&manifest), "--backend".into(), "gpt".into(), "--out".into(), out.clone()]),
        ("replay without cache", vec!["run".into(), "--manifest".into(), s(&manifest), "--backend".into(), "replay".into(), "--out".into(), out.clone()]),
        ("remote without endpoint", vec!["run".into(), "--manifest".into(), s(&manifest), "--backend".into(), "remote".into(), "--out".into(), out.clone()]),
        ("invalid config", vec!["run".into(), "--manifest".into(), s(&manifest), "--config".into(), s(&bad_config), "--out".into(), out.clone()]),
        ("missing manifest", vec!["run".into(), "--manifest".into(), s(&tmp.path().join("none.jsonl")), "--out".into(), out.clone()]),
        ("malformed manifest", vec!["run".into(), "--manifest".into(), s(&bad_manifest), "--out".into(), out.clone()]),
        ("unknown shape", vec!["report".into(), "--records".into(), s(&out_dir), "--shape".into(), "table9".into()]),
        ("malformed svi", vec!["score".into(), "--text".into(), s(&text), "--svi".into(), s(&bad_manifest), "--instruction".into(), "Write".into()]),
        ("unknown subcommand", vec!["frobnicate".into()]),
        ("missing argument", vec!["score".into(), "--text".into(), s(&text)]),
    ];
    for (what, args) in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        expect_code(what, &visucraft(&args), 2)?;
    }
    Ok(())
}
