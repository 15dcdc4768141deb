//! Instruction strings for emotion recognition and the QA conversation prompt.
//!
//! Templates are plain text keyed by task and directive (`er.both`,
//! `qa.image.no-text`, ...). The shipped set lives in `data/templates.txt`;
//! a user file in the same format overrides individual keys.

use std::collections::BTreeMap;
use std::path::Path;

use crate::datamodel::{Directive, ExperimentSpec, LabelSet, TextInput};
use crate::{Error, Result};

const BUILTIN_TEMPLATES: &str = include_str!("../data/templates.txt");

const PLACEHOLDERS: [&str; 4] = ["EMOTIONS", "TEXT", "QUESTION", "HISTORY"];

/// Placeholders each key may use.
fn allowed_placeholders(key: &str) -> Option<&'static [&'static str]> {
    Some(match key {
        "er.both" | "er.text" | "er.image" | "er.p1" => &["EMOTIONS", "TEXT"],
        "er.image.no-text" => &["EMOTIONS"],
        "er.p2" | "er.p3" => &["TEXT"],
        "qa.both" | "qa.text" | "qa.image" | "qa.qa" => &["TEXT", "QUESTION", "HISTORY"],
        "qa.image.no-text" => &["QUESTION", "HISTORY"],
        _ => return None,
    })
}

/// A template body split into literal text and placeholders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    key: String,
    skeleton: String,
}

impl PromptTemplate {
    pub fn new(key: &str, skeleton: &str) -> Result<Self> {
        let allowed = allowed_placeholders(key)
            .ok_or_else(|| Error::Config(format!("unknown template key `[{key}]`")))?;
        for name in PLACEHOLDERS {
            let n = skeleton.matches(&format!("{{{name}}}")).count();
            if n > 1 {
                return Err(Error::Config(format!("template `{key}` uses {{{name}}} {n} times")));
            }
            if n == 1 && !allowed.contains(&name) {
                return Err(Error::Config(format!("template `{key}` may not use {{{name}}}")));
            }
        }
        Ok(Self {
            key: key.to_string(),
            skeleton: skeleton.to_string(),
        })
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn skeleton(&self) -> &str {
        &self.skeleton
    }

    /// Substitutes placeholders in one left-to-right pass, so placeholder-like
    /// text inside the values is never expanded.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.skeleton.len() + 256);
        let mut rest = self.skeleton.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let hit = values.iter().find(|(name, _)| {
                after.starts_with(name) && after[name.len()..].starts_with('}')
            });
            match hit {
                Some((name, value)) => {
                    out.push_str(value);
                    rest = &after[name.len() + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// A complete set of templates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

fn unescape(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('s') => out.push(' '),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Parses `[key]` sections; lines before the first header starting with `#`
/// or blank are ignored.
fn parse_sections(text: &str) -> Result<Vec<(String, String)>> {
    let mut sections: Vec<(String, Vec<&str>)> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let trimmed = line.trim_end();
        if trimmed.starts_with('[') && trimmed.ends_with(']') && trimmed.len() > 2 {
            sections.push((trimmed[1..trimmed.len() - 1].trim().to_string(), Vec::new()));
            continue;
        }
        match sections.last_mut() {
            Some((_, body)) => body.push(line),
            None if trimmed.is_empty() || trimmed.starts_with('#') => {}
            None => {
                return Err(Error::Config(format!(
                    "template file line {}: text before the first [key] header",
                    no + 1
                )))
            }
        }
    }
    Ok(sections
        .into_iter()
        .map(|(key, mut body)| {
            while body.last().is_some_and(|l| l.trim().is_empty()) {
                body.pop();
            }
            let joined = body.iter().map(|l| unescape(l)).collect::<Vec<_>>().join("\n");
            (key, joined)
        })
        .collect())
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self::parse_standalone(BUILTIN_TEMPLATES).expect("shipped templates are valid")
    }

    fn parse_standalone(text: &str) -> Result<Self> {
        let mut templates = BTreeMap::new();
        for (key, body) in parse_sections(text)? {
            let t = PromptTemplate::new(&key, &body)?;
            if templates.insert(key.clone(), t).is_some() {
                return Err(Error::Config(format!("template `{key}` defined twice")));
            }
        }
        Ok(Self { templates })
    }

    /// Parses a template file; keys it does not define keep the shipped text.
    pub fn parse(text: &str) -> Result<Self> {
        let overrides = Self::parse_standalone(text)?;
        let mut set = Self::builtin();
        set.templates.extend(overrides.templates);
        Ok(set)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("template file {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Result<&PromptTemplate> {
        self.templates
            .get(key)
            .ok_or_else(|| Error::Config(format!("no template `{key}`")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Emotion-recognition prompt for one utterance. `text` is ignored when
    /// the spec has no text input.
    pub fn build_er_prompt(&self, spec: &ExperimentSpec, text: &str, labels: &LabelSet) -> Result<String> {
        let key = er_template_key(spec)?;
        let clause = render_label_clause(labels);
        Ok(self
            .get(key)?
            .render(&[("EMOTIONS", &clause), ("TEXT", text)]))
    }

    /// QA prompt for one turn. `story` is the narrative to include, or `None`
    /// when the model only sees the image (allowed for the image directive
    /// only).
    pub fn build_qa_prompt(
        &self,
        question: &str,
        history: &[(String, String)],
        directive: Directive,
        story: Option<&str>,
    ) -> Result<String> {
        let key = qa_template_key(directive, story.is_some())?;
        let history = render_history(history);
        let story = story.unwrap_or("");
        Ok(self.get(key)?.render(&[
            ("TEXT", story),
            ("HISTORY", &history),
            ("QUESTION", question),
        ]))
    }
}

/// The label list as shown to the model: the set's verbatim clause when it has
/// one, otherwise the labels joined with ", ".
pub fn render_label_clause(labels: &LabelSet) -> String {
    match labels.clause() {
        Some(c) => c.to_string(),
        None => labels.labels().join(", "),
    }
}

pub fn er_template_key(spec: &ExperimentSpec) -> Result<&'static str> {
    spec.check_task(crate::datamodel::Task::Er)?;
    Ok(match (spec.directive, spec.text_input) {
        (Directive::Image, TextInput::None) => "er.image.no-text",
        (_, TextInput::None) => {
            return Err(Error::InvalidSpec(vec![crate::datamodel::Violation(
                "without text input the directive must be image".into(),
            )]))
        }
        (Directive::Both, _) => "er.both",
        (Directive::Text, _) => "er.text",
        (Directive::Image, _) => "er.image",
        (Directive::P1, _) => "er.p1",
        (Directive::P2, _) => "er.p2",
        (Directive::P3, _) => "er.p3",
        (Directive::Qa, _) => unreachable!("rejected by check_task"),
    })
}

pub fn qa_template_key(directive: Directive, with_text: bool) -> Result<&'static str> {
    Ok(match (directive, with_text) {
        (Directive::Both, true) => "qa.both",
        (Directive::Text, true) => "qa.text",
        (Directive::Image, true) => "qa.image",
        (Directive::Image, false) => "qa.image.no-text",
        (Directive::Qa, true) => "qa.qa",
        (d, _) if d.is_special() => {
            return Err(Error::UnsupportedDirective {
                directive: d.to_string(),
                task: "qa".into(),
            })
        }
        (d, false) => {
            return Err(Error::Precondition(format!(
                "QA directive `{d}` needs the story text"
            )))
        }
        (_, true) => unreachable!("all directives covered"),
    })
}

/// Prior turns as `Q: … A: …` lines, answers kept even when empty.
pub fn render_history(history: &[(String, String)]) -> String {
    history
        .iter()
        .map(|(q, a)| format!("Q: {q} A: {a}\n"))
        .collect()
}

/// [`TemplateSet::build_er_prompt`] with the shipped templates.
pub fn build_er_prompt(spec: &ExperimentSpec, text: &str, labels: &LabelSet) -> Result<String> {
    TemplateSet::builtin().build_er_prompt(spec, text, labels)
}

/// [`TemplateSet::build_qa_prompt`] with the shipped templates.
pub fn build_qa_prompt(
    question: &str,
    history: &[(String, String)],
    directive: Directive,
    story: Option<&str>,
) -> Result<String> {
    TemplateSet::builtin().build_qa_prompt(question, history, directive, story)
}
