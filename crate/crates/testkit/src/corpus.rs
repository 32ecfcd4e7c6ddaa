//! Synthetic C corpora in the pipeline's JSONL line schema.
//!
//! Functions are stamped from a handful of families (buffer copies, parsers,
//! list teardown, formatting, table lookups, ...) with randomized identifiers
//! and constants. Vulnerable variants carry the offending statements in
//! `vul_lines`, each a verbatim line of `func`.

use serde_json::{json, Value};

struct Rng(u64);

impl Rng {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn pick<'a>(&mut self, items: &[&'a str]) -> &'a str {
        items[(self.next() % items.len() as u64) as usize]
    }

    fn range(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.next() % (hi - lo)
    }
}

const NOUNS: &[&str] = &[
    "packet", "frame", "header", "buffer", "record", "entry", "token", "node", "chunk", "block", "message", "sector",
    "slot", "page", "field", "value",
];
const VERBS: &[&str] = &[
    "read", "parse", "copy", "decode", "encode", "fill", "load", "store", "handle", "process", "update", "scan",
];
const PREFIXES: &[&str] = &["net", "usb", "vnc", "qemu", "av", "img", "tcp", "xml", "ssl", "fs"];
const VARS: &[&str] = &["len", "size", "count", "n", "idx", "pos", "off", "total"];

struct Generated {
    code: String,
    vul_lines: Vec<String>,
}

fn name(rng: &mut Rng) -> String {
    format!("{}_{}_{}", rng.pick(PREFIXES), rng.pick(VERBS), rng.pick(NOUNS))
}

fn family(rng: &mut Rng, which: u64, vulnerable: bool) -> Generated {
    let f = name(rng);
    let noun = rng.pick(NOUNS);
    let var = rng.pick(VARS);
    let cap = rng.range(8, 512);
    match which {
        0 => {
            let bad = format!("    memcpy(dst, src, {var});");
            let good = format!("    memcpy(dst, src, {var} < {cap} ? {var} : {cap});");
            let body = if vulnerable { &bad } else { &good };
            Generated {
                code: format!(
                    "static int {f}(uint8_t *dst, const uint8_t *src, size_t {var})\n{{\n    if (!dst || !src) {{\n        return -1;\n    }}\n{body}\n    return 0;\n}}"
                ),
                vul_lines: vec![bad],
            }
        }
        1 => {
            let bad = format!("    strcpy(name, {noun}->name);");
            let good = format!("    strncpy(name, {noun}->name, sizeof(name) - 1);");
            let body = if vulnerable { &bad } else { &good };
            Generated {
                code: format!(
                    "int {f}(struct {noun}_info *{noun})\n{{\n    char name[{cap}];\n    memset(name, 0, sizeof(name));\n{body}\n    return register_name(name);\n}}"
                ),
                vul_lines: vec![bad],
            }
        }
        2 => {
            let bad = "        free(cur);\n        cur = cur->next;".to_owned();
            let good = "        struct node *next = cur->next;\n        free(cur);\n        cur = next;".to_owned();
            let body = if vulnerable { &bad } else { &good };
            Generated {
                code: format!(
                    "void {f}(struct node *head)\n{{\n    struct node *cur = head;\n    while (cur != NULL) {{\n{body}\n    }}\n}}"
                ),
                vul_lines: bad.lines().map(str::to_owned).collect(),
            }
        }
        3 => {
            let bad = format!("    for (i = 0; i <= {var}; i++) {{");
            let good = format!("    for (i = 0; i < {var}; i++) {{");
            let body = if vulnerable { &bad } else { &good };
            Generated {
                code: format!(
                    "int {f}(int *table, int {var})\n{{\n    int i;\n    int sum = 0;\n{body}\n        sum += table[i];\n    }}\n    return sum;\n}}"
                ),
                vul_lines: vec![bad],
            }
        }
        4 => {
            let bad = format!("    sprintf(out, \"%s:%d\", {noun}, {var});");
            let good = format!("    snprintf(out, sizeof(out), \"%s:%d\", {noun}, {var});");
            let body = if vulnerable { &bad } else { &good };
            Generated {
                code: format!(
                    "void {f}(const char *{noun}, int {var})\n{{\n    char out[{cap}];\n{body}\n    log_line(out);\n}}"
                ),
                vul_lines: vec![bad],
            }
        }
        5 => {
            let bad = format!("    return lookup[{var}];");
            let good = format!("    if ({var} < 0 || {var} >= {cap}) {{\n        return -EINVAL;\n    }}\n    return lookup[{var}];");
            let body = if vulnerable { &bad } else { &good };
            Generated {
                code: format!(
                    "static int {f}(int {var})\n{{\n    static const int lookup[{cap}] = {{ 0 }};\n{body}\n}}"
                ),
                vul_lines: vec![bad],
            }
        }
        6 => {
            let bad = format!("    {noun}_buf = malloc({var} * sizeof(int));");
            let good = format!("    if ({var} > SIZE_MAX / sizeof(int)) {{\n        return NULL;\n    }}\n    {noun}_buf = malloc({var} * sizeof(int));");
            let body = if vulnerable { &bad } else { &good };
            Generated {
                code: format!(
                    "int *{f}(size_t {var})\n{{\n    int *{noun}_buf;\n{body}\n    if ({noun}_buf == NULL) {{\n        return NULL;\n    }}\n    return {noun}_buf;\n}}"
                ),
                vul_lines: vec![bad],
            }
        }
        _ => {
            let bad = format!("    {var} = ntohs(hdr->length);\n    read_bytes(s, data, {var});");
            let good = format!("    {var} = ntohs(hdr->length);\n    if ({var} > {cap}) {{\n        return -1;\n    }}\n    read_bytes(s, data, {var});");
            let body = if vulnerable { &bad } else { &good };
            Generated {
                code: format!(
                    "static int {f}(struct session *s, const struct {noun}_hdr *hdr)\n{{\n    uint8_t data[{cap}];\n    int {var};\n{body}\n    return consume(s, data, {var});\n}}"
                ),
                vul_lines: bad.lines().map(str::to_owned).collect(),
            }
        }
    }
}

/// `n_vul` vulnerable lines (ids `v<i>`) followed by `n_clean` clean lines
/// (ids `c<i>`).
pub fn synthetic_corpus(n_vul: usize, n_clean: usize, seed: u64) -> Vec<Value> {
    let mut rng = Rng(seed);
    let mut out = Vec::with_capacity(n_vul + n_clean);
    for i in 0..n_vul {
        let which = rng.next() % 8;
        let g = family(&mut rng, which, true);
        out.push(json!({
            "id": format!("v{i}"),
            "func": g.code,
            "target": 1,
            "vul_lines": g.vul_lines,
            "project": rng.pick(PREFIXES),
        }));
    }
    for i in 0..n_clean {
        let which = rng.next() % 8;
        let g = family(&mut rng, which, false);
        out.push(json!({
            "id": format!("c{i}"),
            "func": g.code,
            "target": 0,
            "project": rng.pick(PREFIXES),
        }));
    }
    out
}

/// Lines of [`synthetic_corpus`] joined as JSONL text.
pub fn synthetic_jsonl(n_vul: usize, n_clean: usize, seed: u64) -> String {
    synthetic_corpus(n_vul, n_clean, seed)
        .iter()
        .map(|v| format!("{v}\n"))
        .collect()
}
