//! Enclosing function / class lookup for C-family sources.
//!
//! A small lexer walks the file skipping comments, string and character
//! literals (raw strings included) and preprocessor lines, and tracks brace
//! blocks. Each block is classified from the statement text preceding its
//! opening brace: function bodies and class/struct/union bodies become
//! [`Scope`]s; namespaces, control-flow blocks, lambdas and brace
//! initialisers do not.

use std::path::Path;

use thiserror::Error;

/// Lines either side of the error line when no scope encloses it.
pub const FALLBACK_WINDOW: u32 = 10;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line} out of range (file has {total} lines)")]
    LineOutOfRange { line: u32, total: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScopeKind {
    Function,
    Class,
}

/// A function or class definition spanning `start_line..=end_line` (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scope {
    pub kind: ScopeKind,
    pub name: String,
    pub start_line: u32,
    pub end_line: u32,
}

/// Source text of the smallest function or class containing `line`, or a
/// ±[`FALLBACK_WINDOW`] line window when there is none.
pub fn extract_context(file: &Path, line: u32) -> Result<String, ContextError> {
    let bytes = std::fs::read(file).map_err(|source| ContextError::Io {
        path: file.display().to_string(),
        source,
    })?;
    let text = String::from_utf8_lossy(&bytes);
    context_in_source(&text, line)
}

pub(crate) fn context_in_source(text: &str, line: u32) -> Result<String, ContextError> {
    let lines: Vec<&str> = text.lines().collect();
    let total = lines.len() as u32;
    if line == 0 || line > total {
        return Err(ContextError::LineOutOfRange { line, total });
    }
    let (start, end) = match enclosing_scope(text, line) {
        Some(s) => (s.start_line, s.end_line),
        None => (
            line.saturating_sub(FALLBACK_WINDOW).max(1),
            (line + FALLBACK_WINDOW).min(total),
        ),
    };
    Ok(lines[(start - 1) as usize..end as usize].join("\n"))
}

/// Innermost function or class definition containing `line`.
pub fn enclosing_scope(text: &str, line: u32) -> Option<Scope> {
    scan_scopes(text)
        .into_iter()
        .filter(|s| s.start_line <= line && line <= s.end_line)
        .min_by_key(|s| (s.end_line - s.start_line, u32::MAX - s.start_line))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BlockKind {
    Function,
    Class,
    Other,
    /// Brace inside an expression; the enclosing statement resumes after it.
    Expression,
}

struct Block {
    kind: BlockKind,
    name: String,
    start_line: u32,
    saved_header: String,
    saved_start: u32,
    saved_parens: i32,
}

/// All complete function and class scopes in `text`.
pub fn scan_scopes(text: &str) -> Vec<Scope> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut scopes = Vec::new();
    let mut stack: Vec<Block> = Vec::new();

    let mut line: u32 = 1;
    let mut at_line_start = true;
    let mut header = String::new();
    let mut header_start: u32 = 1;
    let mut parens: i32 = 0;
    let mut prev_sig: char = ' ';

    let mut i = 0;
    while i < n {
        let c = chars[i];
        if c == '\n' {
            line += 1;
            at_line_start = true;
            if !header.is_empty() {
                header.push(' ');
            }
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            if !header.is_empty() && !header.ends_with(' ') {
                header.push(' ');
            }
            i += 1;
            continue;
        }
        if at_line_start && c == '#' {
            // Preprocessor directive, honouring backslash continuations.
            while i < n && chars[i] != '\n' {
                if chars[i] == '\\' && i + 1 < n && chars[i + 1] == '\n' {
                    line += 1;
                    i += 2;
                    continue;
                }
                if chars[i] == '/' && i + 1 < n && chars[i + 1] == '*' {
                    i = skip_block_comment(&chars, i, &mut line);
                    continue;
                }
                i += 1;
            }
            continue;
        }
        at_line_start = false;

        if c == '/' && i + 1 < n && chars[i + 1] == '/' {
            while i < n && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c == '/' && i + 1 < n && chars[i + 1] == '*' {
            i = skip_block_comment(&chars, i, &mut line);
            if !header.is_empty() && !header.ends_with(' ') {
                header.push(' ');
            }
            continue;
        }
        if c == '"' {
            if header.trim().is_empty() {
                header.clear();
                header_start = line;
            }
            i = if is_raw_prefix(&chars, i) {
                skip_raw_string(&chars, i, &mut line)
            } else {
                skip_quoted(&chars, i, '"', &mut line)
            };
            header.push_str("\"\"");
            prev_sig = '"';
            continue;
        }
        if c == '\'' {
            if in_number_literal(&chars, i) && i + 1 < n && chars[i + 1].is_ascii_alphanumeric() {
                // Digit separator: 1'000'000.
                i += 1;
                continue;
            }
            i = skip_quoted(&chars, i, '\'', &mut line);
            header.push_str("''");
            prev_sig = '\'';
            continue;
        }

        match c {
            '{' => {
                let kind = if parens > 0
                    || has_toplevel_assign(&header)
                    || starts_with_word(&header, &["return", "throw", "co_return", "co_yield"])
                    || (in_ctor_init_list(&header) && (is_ident(prev_sig) || prev_sig == '>'))
                {
                    BlockKind::Expression
                } else {
                    classify(&header)
                };
                let name = match kind {
                    BlockKind::Function => function_name(&header),
                    BlockKind::Class => class_name(&header),
                    _ => String::new(),
                };
                let start = if header.trim().is_empty() { line } else { header_start };
                stack.push(Block {
                    kind,
                    name,
                    start_line: start,
                    saved_header: std::mem::take(&mut header),
                    saved_start: header_start,
                    saved_parens: parens,
                });
                parens = 0;
                header_start = line;
            }
            '}' => {
                if let Some(block) = stack.pop() {
                    match block.kind {
                        BlockKind::Function | BlockKind::Class => {
                            scopes.push(Scope {
                                kind: if block.kind == BlockKind::Function {
                                    ScopeKind::Function
                                } else {
                                    ScopeKind::Class
                                },
                                name: block.name,
                                start_line: block.start_line,
                                end_line: line,
                            });
                            header.clear();
                            parens = 0;
                        }
                        BlockKind::Expression => {
                            header = block.saved_header;
                            header.push_str("{}");
                            header_start = block.saved_start;
                            parens = block.saved_parens;
                        }
                        BlockKind::Other => {
                            header.clear();
                            parens = 0;
                        }
                    }
                }
            }
            ';' if parens <= 0 => {
                header.clear();
                parens = 0;
            }
            ':' if is_access_label(&header, &chars, i) => {
                header.clear();
            }
            _ => {
                if header.trim().is_empty() {
                    header.clear();
                    header_start = line;
                }
                match c {
                    '(' => parens += 1,
                    ')' => parens -= 1,
                    _ => {}
                }
                header.push(c);
            }
        }
        if c != '}' && c != ';' {
            prev_sig = c;
        } else {
            prev_sig = ' ';
        }
        i += 1;
    }
    scopes
}

fn skip_block_comment(chars: &[char], mut i: usize, line: &mut u32) -> usize {
    i += 2;
    while i < chars.len() {
        if chars[i] == '\n' {
            *line += 1;
        }
        if chars[i] == '*' && i + 1 < chars.len() && chars[i + 1] == '/' {
            return i + 2;
        }
        i += 1;
    }
    i
}

fn skip_quoted(chars: &[char], mut i: usize, quote: char, line: &mut u32) -> usize {
    i += 1;
    while i < chars.len() {
        match chars[i] {
            '\\' => i += 2,
            '\n' => {
                // Unterminated literal; stop at end of line.
                return i;
            }
            c if c == quote => return i + 1,
            _ => i += 1,
        }
    }
    let _ = line;
    i
}

fn is_raw_prefix(chars: &[char], quote: usize) -> bool {
    if quote == 0 || chars[quote - 1] != 'R' {
        return false;
    }
    // R, LR, uR, UR, u8R, and not the tail of a longer identifier.
    let mut j = quote - 1;
    while j > 0 && (chars[j - 1] == 'u' || chars[j - 1] == 'U' || chars[j - 1] == 'L' || chars[j - 1] == '8') {
        j -= 1;
    }
    j == 0 || !is_ident(chars[j - 1])
}

fn skip_raw_string(chars: &[char], quote: usize, line: &mut u32) -> usize {
    let mut i = quote + 1;
    let mut delim = String::new();
    while i < chars.len() && chars[i] != '(' {
        delim.push(chars[i]);
        i += 1;
    }
    let closing: Vec<char> = format!("){delim}\"").chars().collect();
    while i < chars.len() {
        if chars[i] == '\n' {
            *line += 1;
        }
        if chars[i..].starts_with(&closing) {
            return i + closing.len();
        }
        i += 1;
    }
    i
}

/// The token ending right before `i` is a numeric literal.
fn in_number_literal(chars: &[char], i: usize) -> bool {
    let mut j = i;
    while j > 0 && (chars[j - 1].is_ascii_alphanumeric() || chars[j - 1] == '\'' || chars[j - 1] == '.') {
        j -= 1;
    }
    j < i && chars[j].is_ascii_digit()
}

fn is_ident(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn words(header: &str) -> impl Iterator<Item = &str> {
    header
        .split(|c: char| !is_ident(c))
        .filter(|w| !w.is_empty())
}

fn starts_with_word(header: &str, kws: &[&str]) -> bool {
    words(header).next().is_some_and(|w| kws.contains(&w))
}

fn is_access_label(header: &str, chars: &[char], i: usize) -> bool {
    let next_colon = i + 1 < chars.len() && chars[i + 1] == ':';
    let prev_colon = i > 0 && chars[i - 1] == ':';
    if next_colon || prev_colon {
        return false;
    }
    let h = header.trim();
    matches!(
        h,
        "public" | "private" | "protected" | "public slots" | "private slots" | "signals"
    ) || starts_with_word(h, &["case", "default"]) && !h.contains('(')
}

/// `=` at paren depth zero that is not part of `==`, `<=`, `operator=` etc.
fn has_toplevel_assign(header: &str) -> bool {
    if header.contains("operator") {
        return false;
    }
    let chars: Vec<char> = header.chars().collect();
    let mut depth = 0i32;
    for (k, &c) in chars.iter().enumerate() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            '=' if depth == 0 => {
                let prev = if k > 0 { chars[k - 1] } else { ' ' };
                let next = chars.get(k + 1).copied().unwrap_or(' ');
                if next != '=' && !matches!(prev, '=' | '!' | '<' | '>') {
                    return true;
                }
            }
            _ => {}
        }
    }
    false
}

/// Header looks like `Foo::Foo(args) : member(...)`: a constructor whose
/// initialiser list is still being read.
fn in_ctor_init_list(header: &str) -> bool {
    let Some(close) = header.find(')') else {
        return false;
    };
    let tail = &header[close..];
    tail.char_indices().any(|(k, c)| {
        c == ':'
            && !tail[..k].ends_with(':')
            && !tail[k + 1..].starts_with(':')
    })
}

fn strip_prefixes(header: &str) -> &str {
    let mut h = header.trim();
    loop {
        if let Some(rest) = h.strip_prefix("[[") {
            match rest.find("]]") {
                Some(end) => h = rest[end + 2..].trim_start(),
                None => return h,
            }
        } else if h.starts_with("template") && h["template".len()..].trim_start().starts_with('<') {
            let open = h.find('<').expect("checked above");
            let mut depth = 0;
            let mut end = None;
            for (k, c) in h[open..].char_indices() {
                match c {
                    '<' => depth += 1,
                    '>' => {
                        depth -= 1;
                        if depth == 0 {
                            end = Some(open + k + 1);
                            break;
                        }
                    }
                    _ => {}
                }
            }
            match end {
                Some(e) => h = h[e..].trim_start(),
                None => return h,
            }
        } else {
            return h;
        }
    }
}

const NON_SCOPE_KEYWORDS: &[&str] = &[
    "if", "else", "for", "while", "do", "switch", "try", "catch", "case", "default",
    "namespace", "extern", "enum", "return", "goto", "asm", "requires",
];

fn classify(header: &str) -> BlockKind {
    let h = strip_prefixes(header);
    if h.is_empty() {
        return BlockKind::Other;
    }
    let first = h.chars().next().expect("non-empty");
    if !(is_ident(first) || first == '~' || first == ':') {
        return BlockKind::Other;
    }
    if starts_with_word(h, NON_SCOPE_KEYWORDS) {
        return BlockKind::Other;
    }
    let paren = h.find('(');
    let class_kw = h
        .char_indices()
        .filter(|&(k, _)| k == 0 || !is_ident(h[..k].chars().last().unwrap_or(' ')))
        .find_map(|(k, _)| {
            ["class", "struct", "union"].iter().find_map(|kw| {
                let rest = &h[k..];
                let after = rest[kw.len().min(rest.len())..].chars().next();
                (rest.starts_with(kw) && after.is_none_or(|c| !is_ident(c))).then_some(k)
            })
        });
    match (class_kw, paren) {
        (Some(k), Some(p)) if k < p => BlockKind::Class,
        (Some(_), None) => BlockKind::Class,
        (_, Some(_)) if h.contains(')') => BlockKind::Function,
        _ => BlockKind::Other,
    }
}

fn function_name(header: &str) -> String {
    let h = strip_prefixes(header);
    let before = match h.find("operator") {
        Some(k) => {
            let rest = &h[k..];
            let end = rest[8..].find('(').map(|p| {
                // operator() has its own parens first.
                if rest[8..].trim_start().starts_with("()") {
                    rest[8..].find("()").unwrap() + 2 + 8
                } else {
                    p + 8
                }
            });
            return h[..k].split_whitespace().last().filter(|w| w.ends_with("::")).unwrap_or("").to_string()
                + rest[..end.unwrap_or(rest.len())].trim();
        }
        None => &h[..h.find('(').unwrap_or(h.len())],
    };
    before
        .trim_end()
        .rsplit(|c: char| c.is_whitespace() || c == '*' || c == '&')
        .next()
        .unwrap_or("")
        .to_string()
}

fn class_name(header: &str) -> String {
    let h = strip_prefixes(header);
    let mut it = words(h).skip_while(|w| !matches!(*w, "class" | "struct" | "union"));
    it.next();
    it.find(|w| !matches!(*w, "final" | "alignas"))
        .unwrap_or("")
        .to_string()
}
