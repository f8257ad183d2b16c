//! A small POSIX-ish shell lexer, just enough to find simple commands inside
//! a workflow `run:` script and to splice rewritten commands back in place.
//!
//! It understands quoting, backslash escapes, line continuations, comments
//! and the list/pipeline operators. It does not expand anything.

use std::ops::Range;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    /// The word after quote removal.
    pub text: String,
    /// Byte range of the raw word in the script.
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimpleCommand {
    pub words: Vec<Word>,
}

impl SimpleCommand {
    /// Byte range from the first to the last word.
    pub fn span(&self) -> Range<usize> {
        match (self.words.first(), self.words.last()) {
            (Some(a), Some(b)) => a.span.start..b.span.end,
            _ => 0..0,
        }
    }

    /// Index of the first word that is the actual program: leading variable
    /// assignments and transparent wrappers (`sudo`, `env`, `time`, ...) are
    /// skipped.
    pub fn program_index(&self) -> Option<usize> {
        let mut i = 0;
        while i < self.words.len() {
            let w = self.words[i].text.as_str();
            if is_assignment(w) {
                i += 1;
                continue;
            }
            match w {
                "sudo" | "time" | "nohup" | "exec" | "command" => {
                    i += 1;
                    while i < self.words.len() && self.words[i].text.starts_with('-') {
                        i += 1;
                    }
                }
                "env" => {
                    i += 1;
                    while i < self.words.len()
                        && (self.words[i].text.starts_with('-') || is_assignment(&self.words[i].text))
                    {
                        i += 1;
                    }
                }
                _ => return Some(i),
            }
        }
        None
    }

    /// The program and its arguments, with assignments and wrappers removed.
    pub fn argv(&self) -> &[Word] {
        match self.program_index() {
            Some(i) => &self.words[i..],
            None => &[],
        }
    }
}

fn is_assignment(word: &str) -> bool {
    let Some((name, _)) = word.split_once('=') else {
        return false;
    };
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Last path component of a program word, so `./mvnw` and `/usr/bin/go`
/// match `mvnw` and `go`.
pub fn program_name(word: &str) -> &str {
    word.rsplit('/').next().unwrap_or(word)
}

/// Splits a script into simple commands in source order.
pub fn split_commands(script: &str) -> Vec<SimpleCommand> {
    let bytes = script.as_bytes();
    let mut commands = Vec::new();
    let mut words: Vec<Word> = Vec::new();
    let mut i = 0;

    let flush = |words: &mut Vec<Word>, commands: &mut Vec<SimpleCommand>| {
        if !words.is_empty() {
            commands.push(SimpleCommand {
                words: std::mem::take(words),
            });
        }
    };

    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\r' => i += 1,
            b'\\' if bytes.get(i + 1) == Some(&b'\n') => i += 2,
            b'\n' | b';' | b'(' | b')' | b'|' => {
                flush(&mut words, &mut commands);
                i += 1;
                if c == b'|' && bytes.get(i) == Some(&b'|') {
                    i += 1;
                }
            }
            b'&' => {
                flush(&mut words, &mut commands);
                i += 1;
                if bytes.get(i) == Some(&b'&') {
                    i += 1;
                }
            }
            b'#' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            _ => {
                let (word, end) = lex_word(script, i);
                words.push(word);
                i = end;
            }
        }
    }
    flush(&mut words, &mut commands);
    commands
}

fn lex_word(script: &str, start: usize) -> (Word, usize) {
    let bytes = script.as_bytes();
    let mut text = String::new();
    let mut i = start;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\r' | b'\n' | b';' | b'(' | b')' | b'|' => break,
            b'&' => {
                // `2>&1`, `>&2` and `&>` stay inside the word.
                let prev = if i > start { bytes[i - 1] } else { 0 };
                if prev == b'>' || prev == b'<' || bytes.get(i + 1) == Some(&b'>') {
                    text.push('&');
                    i += 1;
                } else {
                    break;
                }
            }
            b'\\' => {
                if bytes.get(i + 1) == Some(&b'\n') {
                    break;
                }
                if let Some(ch) = script[i + 1..].chars().next() {
                    text.push(ch);
                    i += 1 + ch.len_utf8();
                } else {
                    i += 1;
                }
            }
            b'\'' => {
                i += 1;
                while i < bytes.len() && bytes[i] != b'\'' {
                    let ch = script[i..].chars().next().unwrap();
                    text.push(ch);
                    i += ch.len_utf8();
                }
                i += 1;
            }
            b'"' => {
                i += 1;
                while i < bytes.len() && bytes[i] != b'"' {
                    if bytes[i] == b'\\'
                        && matches!(bytes.get(i + 1), Some(b'"' | b'\\' | b'$' | b'`'))
                    {
                        text.push(bytes[i + 1] as char);
                        i += 2;
                        continue;
                    }
                    let ch = script[i..].chars().next().unwrap();
                    text.push(ch);
                    i += ch.len_utf8();
                }
                i += 1;
            }
            _ => {
                let ch = script[i..].chars().next().unwrap();
                text.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    let end = i.min(bytes.len());
    (
        Word {
            text,
            span: start..end,
        },
        end,
    )
}

/// Returns `script` with the given byte ranges replaced. Ranges must not
/// overlap.
pub fn splice(script: &str, mut edits: Vec<(Range<usize>, String)>) -> String {
    edits.sort_by_key(|(r, _)| r.start);
    let mut out = String::with_capacity(script.len() + 64);
    let mut cursor = 0;
    for (range, text) in edits {
        out.push_str(&script[cursor..range.start]);
        out.push_str(&text);
        cursor = range.end;
    }
    out.push_str(&script[cursor..]);
    out
}

/// Quotes a word for inclusion in a shell command when needed.
pub fn quote(word: &str) -> String {
    let safe = !word.is_empty()
        && word
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_./=:,+@%".contains(c));
    if safe {
        word.to_string()
    } else {
        format!("\"{}\"", word.replace('\\', "\\\\").replace('"', "\\\""))
    }
}
