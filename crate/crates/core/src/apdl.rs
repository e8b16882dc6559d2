//! APDL script model and the solver error-log extractor.
//!
//! Only the line-level grammar is modelled: one command per line, written as
//! `NAME[,arg...]`, with `!` starting a comment. Slash and star commands
//! (`/PREP7`, `*GET`) keep their prefix in [`CommandPrefix`] so the command
//! name itself is always a plain uppercase token.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prefix that marks every error line in a solver log.
pub const ERROR_SENTINEL: &str = "*** ERROR *** ";
/// Last line of every successful solver log.
pub const SUCCESS_TRAILER: &str = "SOLUTION COMPLETE";
/// Prefix of the line announcing each post-processing image.
pub const IMAGE_LINE_PREFIX: &str = "IMAGE WRITTEN: ";

static NAME_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[A-Z][A-Z0-9]*$").unwrap());

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: `{text}` is not a command, comment or blank line")]
    InvalidLine { line: usize, text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CommandPrefix {
    #[default]
    None,
    Slash,
    Star,
}

impl CommandPrefix {
    fn as_str(self) -> &'static str {
        match self {
            CommandPrefix::None => "",
            CommandPrefix::Slash => "/",
            CommandPrefix::Star => "*",
        }
    }
}

/// A single APDL command line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApdlCommand {
    #[serde(default, skip_serializing_if = "is_no_prefix")]
    pub prefix: CommandPrefix,
    pub name: String,
    pub args: Vec<String>,
    pub line_no: usize,
}

fn is_no_prefix(p: &CommandPrefix) -> bool {
    *p == CommandPrefix::None
}

impl ApdlCommand {
    /// Builds a plain (unprefixed) command. `line_no` is 0 for synthesized commands.
    pub fn new<I, S>(name: &str, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            prefix: CommandPrefix::None,
            name: name.to_ascii_uppercase(),
            args: args.into_iter().map(Into::into).collect(),
            line_no: 0,
        }
    }

    pub fn slash<I, S>(name: &str, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            prefix: CommandPrefix::Slash,
            ..Self::new(name, args)
        }
    }

    pub fn is(&self, name: &str) -> bool {
        self.prefix == CommandPrefix::None && self.name == name
    }

    /// Argument `idx`, trimmed, or `""` when absent.
    pub fn arg(&self, idx: usize) -> &str {
        self.args.get(idx).map(|a| a.trim()).unwrap_or("")
    }

    pub fn arg_f64(&self, idx: usize) -> Option<f64> {
        self.arg(idx).parse().ok()
    }

    /// Command identity ignoring the source line number.
    pub fn same_as(&self, other: &ApdlCommand) -> bool {
        self.prefix == other.prefix && self.name == other.name && self.args == other.args
    }
}

impl fmt::Display for ApdlCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.prefix.as_str(), self.name)?;
        for a in &self.args {
            write!(f, ",{a}")?;
        }
        Ok(())
    }
}

/// A parsed APDL script. `source_text` is the text the script was parsed
/// from, or the rendered text for scripts built programmatically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ApdlScript {
    pub commands: Vec<ApdlCommand>,
    pub source_text: String,
}

impl ApdlScript {
    pub fn from_commands(commands: Vec<ApdlCommand>) -> Self {
        let mut script = Self {
            commands,
            source_text: String::new(),
        };
        script.source_text = render_script(&script);
        script
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn same_commands(&self, other: &ApdlScript) -> bool {
        self.commands.len() == other.commands.len()
            && self
                .commands
                .iter()
                .zip(&other.commands)
                .all(|(a, b)| a.same_as(b))
    }

    pub fn find_all<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ApdlCommand> + 'a {
        self.commands.iter().filter(move |c| c.is(name))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.commands.iter().position(|c| c.is(name))
    }

    /// Re-renders `source_text` and renumbers lines after in-place edits.
    pub fn normalized(mut self) -> Self {
        for (i, c) in self.commands.iter_mut().enumerate() {
            c.line_no = i + 1;
        }
        self.source_text = render_script(&self);
        self
    }
}

/// Parses APDL text into commands. Blank lines and `!` comments (whole-line
/// or trailing) are dropped; command names are uppercased.
pub fn parse_script(text: &str) -> Result<ApdlScript, ParseError> {
    let mut commands = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let body = match raw.find('!') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let body = body.trim();
        if body.is_empty() {
            continue;
        }
        let mut parts = body.split(',');
        let head = parts.next().unwrap_or("").trim();
        let (prefix, name) = if let Some(rest) = head.strip_prefix('/') {
            (CommandPrefix::Slash, rest)
        } else if let Some(rest) = head.strip_prefix('*') {
            (CommandPrefix::Star, rest)
        } else {
            (CommandPrefix::None, head)
        };
        let name = name.to_ascii_uppercase();
        if !NAME_RE.is_match(&name) {
            return Err(ParseError::InvalidLine {
                line: line_no,
                text: raw.to_string(),
            });
        }
        commands.push(ApdlCommand {
            prefix,
            name,
            args: parts.map(|a| a.trim().to_string()).collect(),
            line_no,
        });
    }
    Ok(ApdlScript {
        commands,
        source_text: text.to_string(),
    })
}

/// Renders one command per line with a trailing newline; an empty script
/// renders to the empty string.
pub fn render_script(script: &ApdlScript) -> String {
    let mut out = String::new();
    for c in &script.commands {
        out.push_str(&c.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverLog {
    pub lines: Vec<String>,
    pub exit_status: ExitStatus,
}

impl SolverLog {
    pub fn text(&self) -> String {
        self.lines.join("\n")
    }

    pub fn error_lines(&self) -> impl Iterator<Item = (usize, &str)> {
        self.lines
            .iter()
            .enumerate()
            .filter(|(_, l)| l.starts_with(ERROR_SENTINEL))
            .map(|(i, l)| (i, l.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureClass {
    MeshFail,
    ConvFail,
    ElemTypeFail,
    MissingResults,
    HardGeom,
    Unknown,
}

impl FailureClass {
    /// Classes the simulator can inject, in predicate evaluation order.
    pub const INJECTABLE: [FailureClass; 5] = [
        FailureClass::MeshFail,
        FailureClass::ConvFail,
        FailureClass::ElemTypeFail,
        FailureClass::MissingResults,
        FailureClass::HardGeom,
    ];

    /// The fixed phrase that follows the error sentinel for this class.
    pub fn phrase(self) -> Option<&'static str> {
        match self {
            FailureClass::MeshFail => Some("MESH FAILURE"),
            FailureClass::ConvFail => Some("SOLUTION NOT CONVERGED"),
            FailureClass::ElemTypeFail => Some("ELEMENT TYPE"),
            FailureClass::MissingResults => Some("NO RESULTS FOR LOAD STEP"),
            FailureClass::HardGeom => Some("GEOMETRY DECOMPOSITION FAILED"),
            FailureClass::Unknown => None,
        }
    }
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Per-class grammar over the text that follows the sentinel.
static CLASS_PATTERNS: LazyLock<Vec<(FailureClass, Regex)>> = LazyLock::new(|| {
    [
        (FailureClass::MeshFail, r"^MESH FAILURE\b"),
        (FailureClass::ConvFail, r"^SOLUTION NOT CONVERGED\b"),
        (FailureClass::ElemTypeFail, r"^ELEMENT TYPE \S+ IS INVALID FOR\b"),
        (FailureClass::MissingResults, r"^NO RESULTS FOR LOAD STEP\b"),
        (FailureClass::HardGeom, r"^GEOMETRY DECOMPOSITION FAILED\b"),
    ]
    .into_iter()
    .map(|(c, p)| (c, Regex::new(p).unwrap()))
    .collect()
});

static LINE_REF_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[line (\d+)\]\s*$").unwrap());

/// Classes whose grammar matches the text after the sentinel. Used by the
/// extractor and by the mutual-exclusion tests.
pub fn matching_classes(message: &str) -> Vec<FailureClass> {
    CLASS_PATTERNS
        .iter()
        .filter(|(_, re)| re.is_match(message))
        .map(|(c, _)| *c)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSignature {
    pub class: FailureClass,
    pub message: String,
    pub command_ref: Option<usize>,
}

impl FailureSignature {
    pub fn unknown(message: impl Into<String>) -> Self {
        Self {
            class: FailureClass::Unknown,
            message: message.into(),
            command_ref: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractError {
    #[error("solver log reports success; there is no failure to extract")]
    NotAFailure,
}

/// Classifies the first error line of a failed log. A failure log without
/// any sentinel line, or whose first error line matches no grammar, yields
/// an `Unknown` signature.
pub fn extract_failure(log: &SolverLog) -> Result<FailureSignature, ExtractError> {
    if log.exit_status == ExitStatus::Success {
        return Err(ExtractError::NotAFailure);
    }
    let Some((_, line)) = log.error_lines().next() else {
        let last = log.lines.last().cloned().unwrap_or_default();
        return Ok(FailureSignature::unknown(last));
    };
    let message = line[ERROR_SENTINEL.len()..].trim_end().to_string();
    let class = matching_classes(&message)
        .first()
        .copied()
        .unwrap_or(FailureClass::Unknown);
    let command_ref = LINE_REF_RE
        .captures(&message)
        .and_then(|c| c[1].parse().ok());
    Ok(FailureSignature {
        class,
        message,
        command_ref,
    })
}
