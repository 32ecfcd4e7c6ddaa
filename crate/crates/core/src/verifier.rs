//! Lenient syntactic gate for generated C functions.
//!
//! A snippet is rejected when it is empty, contains no function definition,
//! has unbalanced `{}` `()` `[]` once literals and comments are masked, or
//! accumulates too many recoverable lexical/structural errors per 100 lines.
//! Unknown identifiers, types and macros are never errors.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{CodeSample, Label, GENERATED_ORIGIN};
use crate::generator::{GenerationRecord, GenerationStatus};

/// Default tolerated recoverable errors per 100 lines.
pub const DEFAULT_ERROR_THRESHOLD: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Empty,
    NoFunction,
    UnbalancedDelimiters,
    ParseErrorDensity,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Empty => "empty",
            Reason::NoFunction => "no_function",
            Reason::UnbalancedDelimiters => "unbalanced_delimiters",
            Reason::ParseErrorDensity => "parse_error_density",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub accepted: bool,
    pub reasons: Vec<Reason>,
    pub error_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verifier {
    /// Maximum recoverable errors per 100 lines; a snippet strictly above it is rejected.
    pub threshold: f64,
}

impl Default for Verifier {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_ERROR_THRESHOLD,
        }
    }
}

/// [`Verifier::verify`] at the default threshold.
pub fn verify(code: &str) -> Verdict {
    Verifier::default().verify(code)
}

impl Verifier {
    pub fn new(threshold: f64) -> Self {
        Self { threshold }
    }

    pub fn verify(&self, code: &str) -> Verdict {
        if code.trim().is_empty() {
            return Verdict {
                accepted: false,
                reasons: vec![Reason::Empty],
                error_count: 0,
            };
        }
        let lexed = lex(code);
        let mut reasons = Vec::new();
        if !has_function_definition(&lexed.tokens) {
            reasons.push(Reason::NoFunction);
        }
        let balanced = delimiters_balanced(&lexed.tokens);
        if !balanced {
            reasons.push(Reason::UnbalancedDelimiters);
        }
        let mut error_count = lexed.errors;
        if balanced {
            error_count += structural_errors(&lexed.tokens);
        }
        let lines = code.lines().count().max(1);
        let density = error_count as f64 * 100.0 / lines as f64;
        // NaN thresholds reject nothing on density; only a finite comparison can fail.
        if density > self.threshold {
            reasons.push(Reason::ParseErrorDensity);
        }
        Verdict {
            accepted: reasons.is_empty(),
            reasons,
            error_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Number,
    Punct(char),
}

struct Lexed {
    tokens: Vec<Tok>,
    errors: usize,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '$'
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '$'
}

/// Tokenizes with string/char literals, comments and preprocessor lines
/// dropped. Unterminated literals and comments, and characters that cannot
/// appear in C source, count as recoverable errors.
fn lex(code: &str) -> Lexed {
    let chars: Vec<char> = code.chars().collect();
    let mut tokens = Vec::new();
    let mut errors = 0;
    let mut i = 0;
    let mut line_start = true;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            line_start = true;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '#' && line_start {
            // Preprocessor directive, including backslash continuations.
            while i < chars.len() && chars[i] != '\n' {
                if chars[i] == '\\' && chars.get(i + 1) == Some(&'\n') {
                    i += 1;
                }
                i += 1;
            }
            continue;
        }
        line_start = false;
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            loop {
                if i + 1 >= chars.len() {
                    errors += 1;
                    i = chars.len();
                    break;
                }
                if chars[i] == '*' && chars[i + 1] == '/' {
                    i += 2;
                    break;
                }
                i += 1;
            }
            continue;
        }
        if c == '"' || c == '\'' {
            i += 1;
            let mut closed = false;
            while i < chars.len() && chars[i] != '\n' {
                if chars[i] == '\\' {
                    i += 2;
                    continue;
                }
                if chars[i] == c {
                    closed = true;
                    i += 1;
                    break;
                }
                i += 1;
            }
            if !closed {
                errors += 1;
            }
            continue;
        }
        if is_ident_start(c) {
            let start = i;
            while i < chars.len() && is_ident_continue(chars[i]) {
                i += 1;
            }
            // Prefixed literals: L"..", u8"..", U'..'.
            if i < chars.len() && (chars[i] == '"' || chars[i] == '\'') {
                let prefix: String = chars[start..i].iter().collect();
                if matches!(prefix.as_str(), "L" | "u" | "U" | "u8") {
                    continue;
                }
            }
            tokens.push(Tok::Ident(chars[start..i].iter().collect()));
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            while i < chars.len() {
                let d = chars[i];
                let exponent_sign = (d == '+' || d == '-') && i > 0 && matches!(chars[i - 1], 'e' | 'E' | 'p' | 'P');
                if d.is_ascii_alphanumeric() || d == '.' || d == '_' || d == '\'' || exponent_sign {
                    i += 1;
                } else {
                    break;
                }
            }
            tokens.push(Tok::Number);
            continue;
        }
        if c == '\\' && chars.get(i + 1) == Some(&'\n') {
            i += 2;
            continue;
        }
        if "{}()[];,.:?+-*/%=<>!&|^~".contains(c) {
            tokens.push(Tok::Punct(c));
        } else {
            errors += 1;
        }
        i += 1;
    }
    Lexed { tokens, errors }
}

fn opener_for(close: char) -> char {
    match close {
        '}' => '{',
        ')' => '(',
        _ => '[',
    }
}

fn delimiters_balanced(tokens: &[Tok]) -> bool {
    let mut stack = Vec::new();
    for t in tokens {
        match t {
            Tok::Punct(c @ ('{' | '(' | '[')) => stack.push(*c),
            Tok::Punct(c @ ('}' | ')' | ']'))
                if stack.pop() != Some(opener_for(*c)) => {
                    return false;
                }
            _ => {}
        }
    }
    stack.is_empty()
}

const CONTROL_KEYWORDS: &[&str] = &["if", "while", "for", "switch", "return", "sizeof", "do", "else", "case", "goto"];

fn is_punct(t: Option<&Tok>, c: char) -> bool {
    matches!(t, Some(Tok::Punct(p)) if *p == c)
}

/// Index of the token matching the opener at `open`, if any.
fn matching(tokens: &[Tok], open: usize) -> Option<usize> {
    let Tok::Punct(o) = tokens[open] else { return None };
    let close = match o {
        '(' => ')',
        '[' => ']',
        '{' => '}',
        _ => return None,
    };
    let mut depth = 0usize;
    for (j, t) in tokens.iter().enumerate().skip(open) {
        match t {
            Tok::Punct(c) if *c == o => depth += 1,
            Tok::Punct(c) if *c == close => {
                depth -= 1;
                if depth == 0 {
                    return Some(j);
                }
            }
            _ => {}
        }
    }
    None
}

/// An identifier (not a control keyword) followed by a parenthesized list,
/// optional trailing qualifiers or attribute-like macros, then `{`.
fn has_function_definition(tokens: &[Tok]) -> bool {
    for i in 0..tokens.len() {
        let Tok::Ident(name) = &tokens[i] else { continue };
        if CONTROL_KEYWORDS.contains(&name.as_str()) || !is_punct(tokens.get(i + 1), '(') {
            continue;
        }
        let Some(close) = matching(tokens, i + 1) else { continue };
        let mut j = close + 1;
        loop {
            match tokens.get(j) {
                Some(Tok::Punct('{')) => return true,
                Some(Tok::Ident(_)) => {
                    j += 1;
                    // `__attribute__((...))`-style trailers.
                    if is_punct(tokens.get(j), '(') {
                        match matching(tokens, j) {
                            Some(end) => j = end + 1,
                            None => break,
                        }
                    }
                }
                // Old-style parameter declarations: `int f(a) int a; {`.
                Some(Tok::Punct(';' | ',' | '*' | '[' | ']')) => j += 1,
                Some(Tok::Number) => j += 1,
                _ => break,
            }
        }
    }
    false
}

/// Structural slips a lenient parser recovers from: an empty condition in
/// `if`/`while`/`switch`, `else` not following a statement, and a missing `;`
/// before the `}` that closes a statement block.
fn structural_errors(tokens: &[Tok]) -> usize {
    let mut errors = 0;
    for i in 0..tokens.len() {
        match &tokens[i] {
            Tok::Ident(k) if matches!(k.as_str(), "if" | "while" | "switch") => {
                if is_punct(tokens.get(i + 1), '(') && is_punct(tokens.get(i + 2), ')') {
                    errors += 1;
                }
            }
            Tok::Ident(k) if k == "else" => {
                if !(is_punct(i.checked_sub(1).and_then(|p| tokens.get(p)), '}')
                    || is_punct(i.checked_sub(1).and_then(|p| tokens.get(p)), ';'))
                {
                    errors += 1;
                }
            }
            Tok::Punct('{') if opens_statement_block(tokens, i) => {
                if let Some(close) = matching(tokens, i) {
                    if close > i + 1 {
                        let last = &tokens[close - 1];
                        if !matches!(last, Tok::Punct(';' | '{' | '}' | ':')) {
                            errors += 1;
                        }
                    }
                }
            }
            _ => {}
        }
    }
    errors
}

fn opens_statement_block(tokens: &[Tok], open: usize) -> bool {
    let Some(prev) = open.checked_sub(1).map(|p| &tokens[p]) else {
        return false;
    };
    match prev {
        Tok::Punct('{' | '}' | ';' | ':') => true,
        Tok::Ident(k) => k == "else" || k == "do",
        Tok::Punct(')') => {
            // Compound literals `(struct s){...}` follow a cast, not a call-like head.
            let Some(paren) = matching_back(tokens, open - 1) else {
                return false;
            };
            matches!(paren.checked_sub(1).map(|p| &tokens[p]), Some(Tok::Ident(k)) if k != "sizeof" && k != "return")
        }
        _ => false,
    }
}

fn matching_back(tokens: &[Tok], close: usize) -> Option<usize> {
    let mut depth = 0usize;
    for j in (0..=close).rev() {
        match tokens[j] {
            Tok::Punct(')') => depth += 1,
            Tok::Punct('(') => {
                depth -= 1;
                if depth == 0 {
                    return Some(j);
                }
            }
            _ => {}
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedEntry {
    pub prompt_id: String,
    pub reasons: Vec<Reason>,
    pub error_count: usize,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub accepted: Vec<CodeSample>,
    pub rejected: Vec<(GenerationRecord, Verdict)>,
    /// Records with status `ok` that were verified.
    pub verified: usize,
}

impl FilterOutcome {
    /// Rejected share of verified records; 0 when nothing was verified.
    pub fn rejection_rate(&self) -> f64 {
        if self.verified == 0 {
            0.0
        } else {
            self.rejected.len() as f64 / self.verified as f64
        }
    }

    pub fn rejected_entries(&self) -> impl Iterator<Item = RejectedEntry> + '_ {
        self.rejected.iter().map(|(rec, v)| RejectedEntry {
            prompt_id: rec.prompt_id.clone(),
            reasons: v.reasons.clone(),
            error_count: v.error_count,
        })
    }

    pub fn write_rejected_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for entry in self.rejected_entries() {
            serde_json::to_writer(&mut out, &entry)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

/// Id given to the sample generated from `prompt_id`.
pub fn generated_id(prompt_id: &str) -> String {
    format!("gen-{prompt_id}")
}

impl Verifier {
    /// Verifies every `ok` record. Accepted code becomes a vulnerable sample
    /// with origin `generated`, id `gen-<prompt_id>` and the prompt id in its
    /// metadata; other statuses are ignored.
    pub fn filter_generated(&self, records: &[GenerationRecord]) -> FilterOutcome {
        let mut accepted = Vec::new();
        let mut rejected = Vec::new();
        let mut verified = 0;
        for rec in records.iter().filter(|r| r.status == GenerationStatus::Ok) {
            verified += 1;
            let code = rec.extracted_code.as_deref().unwrap_or("");
            let verdict = self.verify(code);
            if verdict.accepted {
                let mut sample = CodeSample::new(generated_id(&rec.prompt_id), code, Label::Vulnerable).with_origin(GENERATED_ORIGIN);
                sample.meta = BTreeMap::from([("prompt_id".to_owned(), rec.prompt_id.clone())]);
                accepted.push(sample);
            } else {
                rejected.push((rec.clone(), verdict));
            }
        }
        FilterOutcome {
            accepted,
            rejected,
            verified,
        }
    }
}

/// [`Verifier::filter_generated`] at the default threshold.
pub fn filter_generated(records: &[GenerationRecord]) -> FilterOutcome {
    Verifier::default().filter_generated(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_examples() {
        assert!(verify("int f(int a){return a+1;}").accepted);
        let prose = verify("Sure! Here is the code you asked for.");
        assert_eq!(prose.reasons, vec![Reason::NoFunction]);
        let broken = verify("int f(){ if (x { return 1; }");
        assert!(broken.reasons.contains(&Reason::UnbalancedDelimiters));
        assert_eq!(verify("  \n\t").reasons, vec![Reason::Empty]);
    }

    #[test]
    fn masked_delimiters() {
        let code = "int f(void)\n{\n    const char *s = \"{[(\";\n    char c = '}';\n    /* ) ] } */\n    // {{{\n    return s[0] + c;\n}";
        let v = verify(code);
        assert!(v.accepted, "{v:?}");
        assert_eq!(v.error_count, 0);
    }

    #[test]
    fn preprocessor_lines_are_masked() {
        let code = "#define OPEN {\n#if X\nint f(void)\n{\n    return 0;\n}\n#endif";
        assert!(verify(code).accepted);
    }

    #[test]
    fn unknown_types_are_fine() {
        let code = "static gboolean qemu_foo(VncState *vs, GError **errp) G_GNUC_UNUSED\n{\n    FOO_BAR baz = MAKE_THING(vs);\n    return baz.ok;\n}";
        assert!(verify(code).accepted, "{:?}", verify(code));
    }

    #[test]
    fn initializers_and_compound_literals_are_not_missing_semicolons() {
        let code = "int f(void)\n{\n    int a[3] = { 1, 2, 3 };\n    struct p q = (struct p){ .x = 1 };\n    enum { A, B } e = A;\n    return a[0] + q.x + e;\n}";
        let v = verify(code);
        assert!(v.accepted, "{v:?}");
        assert_eq!(v.error_count, 0);
    }

    #[test]
    fn density_counts_recoverable_errors() {
        // One missing `;` in a 3-line function is 33 errors per 100 lines.
        let code = "int f(void)\n{\n    return 1 }";
        let v = verify(code);
        assert_eq!(v.error_count, 1);
        assert_eq!(v.reasons, vec![Reason::ParseErrorDensity]);
        assert!(Verifier::new(50.0).verify(code).accepted);
    }

    #[test]
    fn stray_characters_and_unterminated_literals() {
        let v = Verifier::new(f64::INFINITY).verify("int f(void)\n{\n    return @x + `y`;\n}");
        assert_eq!(v.error_count, 3);
        let v = Verifier::new(f64::INFINITY).verify("int f(void)\n{\n    puts(\"abc);\n}");
        assert!(v.error_count >= 1);
    }

    #[test]
    fn empty_condition_and_dangling_else() {
        let v = Verifier::new(f64::INFINITY).verify("int f(int x)\n{\n    if () x = 1;\n    x = 2 else x = 3;\n    return x;\n}");
        assert_eq!(v.error_count, 2);
    }

    #[test]
    fn keywords_are_not_function_heads() {
        assert_eq!(verify("if (x) { y = 1; }").reasons, vec![Reason::NoFunction]);
        assert_eq!(verify("while (x) { y = 1; }").reasons, vec![Reason::NoFunction]);
    }

    #[test]
    fn kr_style_definition() {
        assert!(verify("int f(a, b)\nint a;\nchar *b;\n{\n    return a;\n}").accepted);
    }

    fn record(id: &str, code: &str, status: GenerationStatus) -> GenerationRecord {
        GenerationRecord {
            prompt_id: id.into(),
            attempts: 1,
            raw_response: None,
            extracted_code: Some(code.into()),
            input_tokens: 0,
            output_tokens: 0,
            status,
        }
    }

    #[test]
    fn filter_maps_accepted_records() {
        let records = vec![
            record("a", "int f(void){return 0;}", GenerationStatus::Ok),
            record("b", "int f(void){return 0;", GenerationStatus::Ok),
            record("c", "whatever", GenerationStatus::NoCode),
        ];
        let out = filter_generated(&records);
        assert_eq!(out.verified, 2);
        assert_eq!(out.accepted.len(), 1);
        assert_eq!(out.accepted[0].id, "gen-a");
        assert_eq!(out.accepted[0].origin, GENERATED_ORIGIN);
        assert_eq!(out.accepted[0].label, Label::Vulnerable);
        assert_eq!(out.rejection_rate(), 0.5);
        let mut buf = Vec::new();
        out.write_rejected_jsonl(&mut buf).unwrap();
        let line: serde_json::Value = serde_json::from_slice(buf.trim_ascii_end()).unwrap();
        assert_eq!(line["prompt_id"], "b");
        assert_eq!(line["reasons"][0], "unbalanced_delimiters");
        assert_eq!(filter_generated(&[]).rejection_rate(), 0.0);
    }

    proptest! {
        #[test]
        fn total_and_consistent(code in "\\PC{0,200}") {
            let v = verify(&code);
            prop_assert_eq!(v.accepted, v.reasons.is_empty());
        }

        #[test]
        fn monotone_leniency(code in "[a-z(){};\\n @\"']{0,120}", t in 0.0f64..100.0, dt in 0.0f64..100.0) {
            if Verifier::new(t).verify(&code).accepted {
                prop_assert!(Verifier::new(t + dt).verify(&code).accepted);
            }
        }

        #[test]
        fn literal_content_never_unbalances(body in "[{}()\\[\\]a-z ]{0,30}") {
            let code = format!("int f(void)\n{{\n    const char *s = \"{body}\";\n    /* {body} */\n    return s[0];\n}}");
            let v = verify(&code);
            prop_assert!(!v.reasons.contains(&Reason::UnbalancedDelimiters), "{:?}", v);
        }
    }
}
