//! Prompt construction for the three augmentation strategies.
//!
//! Templates are plain text with `{{placeholder}}` markers. The built-in
//! templates live in `assets/templates/`; alternative ones can be loaded from
//! a directory holding `mutation.txt`, `injection.txt` and `extension.txt`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeSample, Label, SampleLookup};
use crate::retrieval::{Direction, RetrievedPair};

/// Separator between vulnerable lines inside a prompt.
pub const LINE_SEPARATOR: &str = "/~/";
/// Rules the templates allow on important lines.
pub const SAFE_PREFIX_LEN: usize = 5;

const MUTATION_TEMPLATE: &str = include_str!("../assets/templates/mutation.txt");
const INJECTION_TEMPLATE: &str = include_str!("../assets/templates/injection.txt");
const EXTENSION_TEMPLATE: &str = include_str!("../assets/templates/extension.txt");
const DEFAULT_RULES: &str = include_str!("../assets/rules.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormulatorError {
    #[error("template references unknown placeholder `{{{{{0}}}}}`")]
    UnknownPlaceholder(String),
    #[error("template has an unterminated `{{{{` marker")]
    UnterminatedMarker,
    #[error("{strategy} template lacks `{{{{{placeholder}}}}}`")]
    MissingPlaceholder { strategy: Strategy, placeholder: &'static str },
    #[error("rule set needs at least {SAFE_PREFIX_LEN} rules, got {0}")]
    TooFewRules(usize),
    #[error("sample `{id}` should be {expected:?}")]
    WrongLabel { id: String, expected: Label },
    #[error("sample `{0}` has no vulnerable lines")]
    MissingVulLines(String),
    #[error("sample `{0}` not found")]
    UnknownSample(String),
    #[error("pair direction is {actual}, expected {expected}")]
    WrongDirection { expected: Direction, actual: Direction },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Mutation,
    Injection,
    Extension,
}

impl Strategy {
    fn id_prefix(self) -> &'static str {
        match self {
            Strategy::Mutation => "mut",
            Strategy::Injection => "inj",
            Strategy::Extension => "ext",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Mutation => "mutation",
            Strategy::Injection => "injection",
            Strategy::Extension => "extension",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mutation" => Ok(Strategy::Mutation),
            "injection" => Ok(Strategy::Injection),
            "extension" => Ok(Strategy::Extension),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

impl From<Direction> for Strategy {
    fn from(d: Direction) -> Self {
        match d {
            Direction::Injection => Strategy::Injection,
            Direction::Extension => Strategy::Extension,
        }
    }
}

/// A rendered prompt and the samples it was built from
/// (`[vul]` for mutation, `[clean, vul]` otherwise).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub id: String,
    pub strategy: Strategy,
    pub source_ids: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placeholder {
    Rules,
    VulnerableSample,
    CleanSample,
    VulnerableLines,
}

impl Placeholder {
    fn name(self) -> &'static str {
        match self {
            Placeholder::Rules => "rules",
            Placeholder::VulnerableSample => "input_vulnerable_sample",
            Placeholder::CleanSample => "input_clean_sample",
            Placeholder::VulnerableLines => "input_vulnerable_lines",
        }
    }

    fn parse(name: &str) -> Option<Self> {
        [
            Placeholder::Rules,
            Placeholder::VulnerableSample,
            Placeholder::CleanSample,
            Placeholder::VulnerableLines,
        ]
        .into_iter()
        .find(|p| p.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(Placeholder),
}

/// Parsed template. Substitution is single-pass, so code containing `{{`
/// is inserted verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(text: &str) -> Result<Self, FormulatorError> {
        let text = text.strip_suffix('\n').unwrap_or(text);
        let mut segments = Vec::new();
        let mut rest = text;
        while let Some(start) = rest.find("{{") {
            if start > 0 {
                segments.push(Segment::Text(rest[..start].to_owned()));
            }
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or(FormulatorError::UnterminatedMarker)?;
            let name = after[..end].trim();
            let slot = Placeholder::parse(name).ok_or_else(|| FormulatorError::UnknownPlaceholder(name.to_owned()))?;
            segments.push(Segment::Slot(slot));
            rest = &after[end + 2..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Text(rest.to_owned()));
        }
        Ok(Self { segments })
    }

    pub fn has(&self, p: Placeholder) -> bool {
        self.segments.contains(&Segment::Slot(p))
    }

    fn render(&self, fill: impl Fn(Placeholder) -> String) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(p) => out.push_str(&fill(*p)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub mutation: Template,
    pub injection: Template,
    pub extension: Template,
}

impl Default for Templates {
    fn default() -> Self {
        Self::from_texts(MUTATION_TEMPLATE, INJECTION_TEMPLATE, EXTENSION_TEMPLATE)
            .expect("built-in templates are well-formed")
    }
}

impl Templates {
    pub fn from_texts(mutation: &str, injection: &str, extension: &str) -> Result<Self, FormulatorError> {
        let t = Self {
            mutation: Template::parse(mutation)?,
            injection: Template::parse(injection)?,
            extension: Template::parse(extension)?,
        };
        let required: [(Strategy, &Template, &[Placeholder]); 3] = [
            (
                Strategy::Mutation,
                &t.mutation,
                &[Placeholder::Rules, Placeholder::VulnerableSample, Placeholder::VulnerableLines],
            ),
            (
                Strategy::Injection,
                &t.injection,
                &[Placeholder::VulnerableSample, Placeholder::CleanSample, Placeholder::VulnerableLines],
            ),
            (
                Strategy::Extension,
                &t.extension,
                &[Placeholder::VulnerableSample, Placeholder::CleanSample, Placeholder::VulnerableLines],
            ),
        ];
        for (strategy, template, needs) in required {
            if let Some(p) = needs.iter().find(|p| !template.has(**p)) {
                return Err(FormulatorError::MissingPlaceholder {
                    strategy,
                    placeholder: p.name(),
                });
            }
        }
        Ok(t)
    }

    pub fn from_dir(dir: &Path) -> Result<Self, FormulatorError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| FormulatorError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        };
        Self::from_texts(&read("mutation.txt")?, &read("injection.txt")?, &read("extension.txt")?)
    }
}

/// Ordered transformation rules for the mutation prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    rules: Vec<String>,
}

impl Default for RuleSet {
    fn default() -> Self {
        Self::parse(DEFAULT_RULES).expect("built-in rules are valid")
    }
}

impl RuleSet {
    pub fn new(rules: Vec<String>) -> Result<Self, FormulatorError> {
        if rules.len() < SAFE_PREFIX_LEN {
            return Err(FormulatorError::TooFewRules(rules.len()));
        }
        Ok(Self { rules })
    }

    /// One rule per non-blank line.
    pub fn parse(text: &str) -> Result<Self, FormulatorError> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self, FormulatorError> {
        let text = fs::read_to_string(path).map_err(|e| FormulatorError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn rules(&self) -> &[String] {
        &self.rules
    }

    pub fn safe_prefix_len(&self) -> usize {
        SAFE_PREFIX_LEN
    }

    /// `1- first\n2- second\n...`
    pub fn enumerate(&self) -> String {
        self.rules
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{}- {}", i + 1, r))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn join_vul_lines(lines: &[String]) -> String {
    lines.join(LINE_SEPARATOR)
}

/// Renders prompts from samples and retrieved pairs.
#[derive(Debug, Clone, Default)]
pub struct Formulator {
    pub templates: Templates,
    pub rules: RuleSet,
}

impl Formulator {
    pub fn new(templates: Templates, rules: RuleSet) -> Self {
        Self { templates, rules }
    }

    /// Missing vulnerable lines render as an empty slot.
    pub fn render_mutation(&self, sample: &CodeSample) -> Result<PromptInstance, FormulatorError> {
        if sample.label != Label::Vulnerable {
            return Err(FormulatorError::WrongLabel {
                id: sample.id.clone(),
                expected: Label::Vulnerable,
            });
        }
        let rules = self.rules.enumerate();
        let lines = join_vul_lines(sample.vul_lines());
        let text = self.templates.mutation.render(|p| match p {
            Placeholder::Rules => rules.clone(),
            Placeholder::VulnerableSample => sample.code.clone(),
            Placeholder::VulnerableLines => lines.clone(),
            Placeholder::CleanSample => String::new(),
        });
        Ok(PromptInstance {
            id: format!("{}-{}", Strategy::Mutation.id_prefix(), sample.id),
            strategy: Strategy::Mutation,
            source_ids: vec![sample.id.clone()],
            text,
        })
    }

    pub fn render_injection<L: SampleLookup + ?Sized>(&self, pair: &RetrievedPair, store: &L) -> Result<PromptInstance, FormulatorError> {
        self.render_pair(pair, store, Direction::Injection)
    }

    pub fn render_extension<L: SampleLookup + ?Sized>(&self, pair: &RetrievedPair, store: &L) -> Result<PromptInstance, FormulatorError> {
        self.render_pair(pair, store, Direction::Extension)
    }

    /// Dispatches on the pair's own direction.
    pub fn render_pair_any<L: SampleLookup + ?Sized>(&self, pair: &RetrievedPair, store: &L) -> Result<PromptInstance, FormulatorError> {
        self.render_pair(pair, store, pair.direction)
    }

    fn render_pair<L: SampleLookup + ?Sized>(
        &self,
        pair: &RetrievedPair,
        store: &L,
        expected: Direction,
    ) -> Result<PromptInstance, FormulatorError> {
        if pair.direction != expected {
            return Err(FormulatorError::WrongDirection {
                expected,
                actual: pair.direction,
            });
        }
        let clean = store
            .sample(&pair.clean_id)
            .ok_or_else(|| FormulatorError::UnknownSample(pair.clean_id.clone()))?;
        let vul = store
            .sample(&pair.vul_id)
            .ok_or_else(|| FormulatorError::UnknownSample(pair.vul_id.clone()))?;
        if clean.label != Label::Clean {
            return Err(FormulatorError::WrongLabel {
                id: clean.id.clone(),
                expected: Label::Clean,
            });
        }
        if vul.label != Label::Vulnerable {
            return Err(FormulatorError::WrongLabel {
                id: vul.id.clone(),
                expected: Label::Vulnerable,
            });
        }
        if vul.vul_lines().is_empty() {
            return Err(FormulatorError::MissingVulLines(vul.id.clone()));
        }
        let strategy = Strategy::from(expected);
        let template = match strategy {
            Strategy::Injection => &self.templates.injection,
            _ => &self.templates.extension,
        };
        let lines = join_vul_lines(vul.vul_lines());
        let text = template.render(|p| match p {
            Placeholder::VulnerableSample => vul.code.clone(),
            Placeholder::CleanSample => clean.code.clone(),
            Placeholder::VulnerableLines => lines.clone(),
            Placeholder::Rules => self.rules.enumerate(),
        });
        Ok(PromptInstance {
            id: format!("{}-{}-{}", strategy.id_prefix(), clean.id, vul.id),
            strategy,
            source_ids: vec![clean.id.clone(), vul.id.clone()],
            text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusStore;

    fn vul_sample() -> CodeSample {
        CodeSample::new("v1", "int f(char *s) {\n  char b[4];\n  strcpy(b, s);\n}", Label::Vulnerable)
            .with_vul_lines(["char b[4];", "strcpy(b, s);"])
    }

    #[test]
    fn join_rules() {
        assert_eq!(join_vul_lines(&["x = y;".into()]), "x = y;");
        assert_eq!(join_vul_lines(&["a;".into(), "b;".into()]), "a;/~/b;");
        assert_eq!(join_vul_lines(&[]), "");
    }

    #[test]
    fn default_rules_and_templates_load() {
        assert_eq!(RuleSet::default().rules().len(), 18);
        let t = Templates::default();
        assert!(t.mutation.has(Placeholder::Rules));
    }

    #[test]
    fn five_rules_stop_at_five() {
        let f = Formulator::new(
            Templates::default(),
            RuleSet::parse("r one\nr two\nr three\nr four\nr five\n").unwrap(),
        );
        let p = f.render_mutation(&vul_sample()).unwrap();
        assert!(p.text.contains("Rules: 1- r one\n2- r two"));
        assert!(p.text.contains("5- r five\n\nCode Snippet:"));
        assert!(!p.text.contains("6-"));
    }

    #[test]
    fn too_few_rules_rejected() {
        assert_eq!(RuleSet::parse("a\nb\n").unwrap_err(), FormulatorError::TooFewRules(2));
    }

    #[test]
    fn mutation_without_lines_leaves_empty_slot() {
        let f = Formulator::default();
        let mut s = vul_sample();
        let with = f.render_mutation(&s).unwrap();
        s.vul_lines = None;
        let without = f.render_mutation(&s).unwrap();
        assert_eq!(with.text.replace("char b[4];/~/strcpy(b, s);", ""), without.text);
        assert!(without.text.contains("(Lines are separated via /~/)\n\n"));
    }

    #[test]
    fn mutation_rejects_clean_sample() {
        let clean = CodeSample::new("c", "int g(){}", Label::Clean);
        assert!(matches!(Formulator::default().render_mutation(&clean), Err(FormulatorError::WrongLabel { .. })));
    }

    fn pair(direction: Direction, clean: &str, vul: &str) -> RetrievedPair {
        RetrievedPair {
            clean_id: clean.into(),
            vul_id: vul.into(),
            score: 1.0,
            cluster_id: 0,
            direction,
        }
    }

    fn store() -> CorpusStore {
        CorpusStore::from_samples(vec![
            vul_sample(),
            CodeSample::new("c1", "int g(int a) { return a * 2; }", Label::Clean),
            CodeSample::new("v2", "void h(int *p) { p[9] = 0; }", Label::Vulnerable).with_vul_lines(["p[9] = 0;", "void h", "int *p"]),
            CodeSample::new("v3", "void k() {}", Label::Vulnerable),
        ])
        .unwrap()
    }

    #[test]
    fn swapped_labels_rejected() {
        let f = Formulator::default();
        let err = f.render_injection(&pair(Direction::Injection, "v1", "c1"), &store()).unwrap_err();
        assert!(matches!(err, FormulatorError::WrongLabel { .. }));
    }

    #[test]
    fn three_lines_two_separators() {
        let f = Formulator::default();
        let p = f.render_injection(&pair(Direction::Injection, "c1", "v2"), &store()).unwrap();
        let slot = p.text.split("Lines separated by /~/:\n").nth(1).unwrap().lines().next().unwrap();
        assert_eq!(slot.matches(LINE_SEPARATOR).count(), 2);
        assert_eq!(p.source_ids, ["c1", "v2"]);
    }

    #[test]
    fn pair_errors() {
        let f = Formulator::default();
        let s = store();
        assert_eq!(
            f.render_injection(&pair(Direction::Injection, "c1", "v3"), &s).unwrap_err(),
            FormulatorError::MissingVulLines("v3".into())
        );
        assert!(matches!(
            f.render_extension(&pair(Direction::Injection, "c1", "v1"), &s),
            Err(FormulatorError::WrongDirection { .. })
        ));
        assert_eq!(
            f.render_injection(&pair(Direction::Injection, "zz", "v1"), &s).unwrap_err(),
            FormulatorError::UnknownSample("zz".into())
        );
    }

    #[test]
    fn identical_texts_fill_both_slots() {
        let code = "int same(int x) { return x; }";
        let s = CorpusStore::from_samples(vec![
            CodeSample::new("c", code, Label::Clean),
            CodeSample::new("v", code, Label::Vulnerable).with_vul_lines(["return x;"]),
        ])
        .unwrap();
        let p = Formulator::default().render_extension(&pair(Direction::Extension, "c", "v"), &s).unwrap();
        assert_eq!(p.text.matches(code).count(), 2);
    }

    #[test]
    fn code_with_braces_is_inserted_verbatim() {
        let s = CorpusStore::from_samples(vec![
            CodeSample::new("c", "int t() { int a[] = {{1}}; return a[0]; }", Label::Clean),
            CodeSample::new("v", "int u() { {{input_clean_sample}} }", Label::Vulnerable).with_vul_lines(["{{input_clean_sample}}"]),
        ])
        .unwrap();
        let p = Formulator::default().render_injection(&pair(Direction::Injection, "c", "v"), &s).unwrap();
        assert!(p.text.contains("int u() { {{input_clean_sample}} }"));
        assert!(p.text.contains("{{1}}"));
    }

    #[test]
    fn template_parse_errors() {
        assert_eq!(Template::parse("a {{nope}} b").unwrap_err(), FormulatorError::UnknownPlaceholder("nope".into()));
        assert_eq!(Template::parse("a {{rules").unwrap_err(), FormulatorError::UnterminatedMarker);
        assert!(matches!(
            Templates::from_texts("{{rules}} {{input_vulnerable_sample}}", INJECTION_TEMPLATE, EXTENSION_TEMPLATE),
            Err(FormulatorError::MissingPlaceholder { strategy: Strategy::Mutation, .. })
        ));
    }

    #[test]
    fn every_prompt_closes_with_the_fence_instruction() {
        let f = Formulator::default();
        let s = store();
        let prompts = [
            f.render_mutation(&vul_sample()).unwrap(),
            f.render_injection(&pair(Direction::Injection, "c1", "v1"), &s).unwrap(),
            f.render_extension(&pair(Direction::Extension, "c1", "v1"), &s).unwrap(),
        ];
        for p in prompts {
            assert!(p.text.contains("Put the generated code inside ```C ```"));
            assert!(p.text.ends_with("(Do not include comments)"));
            assert!(!p.text.contains("{{"));
            for id in &p.source_ids {
                assert!(s.get(id).is_some());
            }
        }
    }
}
