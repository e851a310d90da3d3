//! Schema-described services and the launch payloads rendered from them.
//!
//! A [`ServiceSpec`] is the static blueprint of a deployable tool. It carries
//! a typed input/output schema, an environment template whose placeholders
//! are filled from launch inputs, resource constraints used for placement,
//! sidecars, and a usage policy. [`validate_service_spec`] reports every
//! invariant violation at once; [`render_launch_payload`] turns a valid spec
//! plus concrete inputs into the [`LaunchPayload`] handed to a backend.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::placement::Resources;
use crate::version::Version;

/// Longest permitted service name; keeps hostnames under the 63-byte DNS label limit.
pub const MAX_SERVICE_NAME_LEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    String,
    Integer,
    Number,
    Boolean,
    Url,
    Secret,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::String => "string",
            FieldKind::Integer => "integer",
            FieldKind::Number => "number",
            FieldKind::Boolean => "boolean",
            FieldKind::Url => "url",
            FieldKind::Secret => "secret",
        }
    }

    /// Whether `value` is an acceptable literal for this kind.
    pub fn accepts(self, value: &Literal) -> bool {
        match (self, value) {
            (FieldKind::Boolean, Literal::Bool(_)) => true,
            (FieldKind::Integer, Literal::Integer(_)) => true,
            (FieldKind::Number, Literal::Integer(_) | Literal::Number(_)) => true,
            (FieldKind::String | FieldKind::Secret, Literal::Text(_)) => true,
            (FieldKind::Url, Literal::Text(s)) => looks_like_url(s),
            _ => false,
        }
    }

    /// Interprets a command-line style `value` for this kind.
    pub fn coerce(self, value: &str) -> Option<Literal> {
        let lit = match self {
            FieldKind::Boolean => Literal::Bool(value.parse().ok()?),
            FieldKind::Integer => Literal::Integer(value.parse().ok()?),
            FieldKind::Number => match value.parse::<i64>() {
                Ok(i) => Literal::Integer(i),
                Err(_) => Literal::Number(value.parse().ok()?),
            },
            FieldKind::String | FieldKind::Secret | FieldKind::Url => Literal::Text(value.into()),
        };
        self.accepts(&lit).then_some(lit)
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A scalar input value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Bool(bool),
    Integer(i64),
    Number(f64),
    Text(String),
}

impl Literal {
    pub fn type_name(&self) -> &'static str {
        match self {
            Literal::Bool(_) => "boolean",
            Literal::Integer(_) => "integer",
            Literal::Number(_) => "number",
            Literal::Text(_) => "string",
        }
    }

    /// The string substituted into environment templates.
    pub fn render(&self) -> String {
        match self {
            Literal::Bool(b) => b.to_string(),
            Literal::Integer(i) => i.to_string(),
            Literal::Number(n) => n.to_string(),
            Literal::Text(s) => s.clone(),
        }
    }
}

impl From<&str> for Literal {
    fn from(s: &str) -> Self {
        Literal::Text(s.into())
    }
}

fn looks_like_url(s: &str) -> bool {
    let Some((scheme, rest)) = s.split_once("://") else {
        return false;
    };
    let mut chars = scheme.chars();
    chars.next().is_some_and(|c| c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || "+.-".contains(c))
        && !rest.is_empty()
        && !rest.chars().any(char::is_whitespace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Literal>,
    #[serde(default)]
    pub description: String,
}

impl FieldSpec {
    pub fn new(name: &str, kind: FieldKind) -> Self {
        Self {
            name: name.into(),
            kind,
            required: false,
            default: None,
            description: String::new(),
        }
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }

    pub fn with_default(mut self, value: Literal) -> Self {
        self.default = Some(value);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSchema {
    #[serde(default)]
    pub inputs: Vec<FieldSpec>,
    #[serde(default)]
    pub outputs: Vec<FieldSpec>,
}

impl IoSchema {
    pub fn input(&self, name: &str) -> Option<&FieldSpec> {
        self.inputs.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceConstraints {
    #[serde(default)]
    pub required_labels: BTreeSet<String>,
    #[serde(default)]
    pub cpu_millicores: u64,
    #[serde(default)]
    pub memory_mib: u64,
    #[serde(default)]
    pub gpu_count: u64,
}

impl ResourceConstraints {
    pub fn requested(&self) -> Resources {
        Resources {
            cpu_millicores: self.cpu_millicores,
            memory_mib: self.memory_mib,
            gpu_count: self.gpu_count,
        }
    }

    pub fn with_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            required_labels: labels.into_iter().map(String::from).collect(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarSpec {
    pub name: String,
    #[serde(default)]
    pub image_ref: String,
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default)]
    pub ports: Vec<u16>,
}

/// Concurrency cap: a positive count or `"unlimited"`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Limit {
    #[default]
    Unlimited,
    Finite(u32),
}

impl Serialize for Limit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Limit::Unlimited => s.serialize_str("unlimited"),
            Limit::Finite(n) => s.serialize_u32(*n),
        }
    }
}

impl<'de> Deserialize<'de> for Limit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u32),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(Limit::Finite(n)),
            Raw::Word(w) if w == "unlimited" => Ok(Limit::Unlimited),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a positive integer or \"unlimited\", got \"{w}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    #[serde(default)]
    pub max_concurrent_entries: Limit,
    #[serde(default)]
    pub restart_budget: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttl_seconds: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    pub version: String,
    #[serde(default)]
    pub image_ref: String,
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default)]
    pub env_template: BTreeMap<String, String>,
    #[serde(default)]
    pub ports: Vec<u16>,
    #[serde(default)]
    pub schema: IoSchema,
    #[serde(default)]
    pub constraints: ResourceConstraints,
    #[serde(default)]
    pub sidecars: Vec<SidecarSpec>,
    #[serde(default)]
    pub web_entry: bool,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub description: String,
}

impl ServiceSpec {
    /// A spec with everything but name and version left empty.
    pub fn minimal(name: &str, version: &str) -> Self {
        Self {
            name: name.into(),
            version: version.into(),
            image_ref: String::new(),
            command: Vec::new(),
            env_template: BTreeMap::new(),
            ports: Vec::new(),
            schema: IoSchema::default(),
            constraints: ResourceConstraints::default(),
            sidecars: Vec::new(),
            web_entry: false,
            policy: Policy::default(),
            description: String::new(),
        }
    }

    pub fn parsed_version(&self) -> Option<Version> {
        self.version.parse().ok()
    }

    pub fn service_ref(&self) -> ServiceRef {
        ServiceRef {
            name: self.name.clone(),
            version: self.version.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServiceRef {
    pub name: String,
    pub version: String,
}

impl fmt::Display for ServiceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.version)
    }
}

/// Everything a backend needs to start one entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaunchPayload {
    pub service: ServiceRef,
    pub image_ref: String,
    pub command: Vec<String>,
    pub resolved_env: BTreeMap<String, String>,
    /// Names of `resolved_env` variables carrying `secret` inputs.
    #[serde(default)]
    pub secret_env: BTreeSet<String>,
    pub ports: Vec<u16>,
    pub sidecars: Vec<SidecarSpec>,
    pub constraints: ResourceConstraints,
    pub web_entry: bool,
    pub event_token: String,
    pub entry_id: String,
    /// Restart attempt this payload was rendered for; backends key idempotent
    /// provisioning on `(entry_id, attempt)`.
    #[serde(default)]
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    pub fn contains(&self, rendered: &str) -> bool {
        self.violations.iter().any(|v| v.to_string() == rendered)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

pub fn is_slug(s: &str) -> bool {
    let mut bytes = s.bytes();
    bytes.next().is_some_and(|b| b.is_ascii_lowercase())
        && bytes.all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

pub fn is_field_name(s: &str) -> bool {
    let mut bytes = s.bytes();
    bytes.next().is_some_and(|b| b.is_ascii_lowercase())
        && bytes.all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

fn is_env_name(s: &str) -> bool {
    let mut bytes = s.bytes();
    bytes
        .next()
        .is_some_and(|b| b.is_ascii_alphabetic() || b == b'_')
        && bytes.all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Placeholder<'a> {
    Input(&'a str),
    EventToken,
    Unknown(&'a str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment<'a> {
    Text(&'a str),
    Slot(Placeholder<'a>),
}

/// Splits a template into literal text and `{{...}}` slots. `Err` on an unterminated slot.
fn segments(template: &str) -> Result<Vec<Segment<'_>>, ()> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        if start > 0 {
            out.push(Segment::Text(&rest[..start]));
        }
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or(())?;
        let inner = after[..end].trim();
        let slot = if inner == "event.token" {
            Placeholder::EventToken
        } else if let Some(field) = inner.strip_prefix("input.") {
            Placeholder::Input(field)
        } else {
            Placeholder::Unknown(inner)
        };
        out.push(Segment::Slot(slot));
        rest = &after[end + 2..];
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest));
    }
    Ok(out)
}

/// Checks every invariant of a candidate spec and lists all violations.
pub fn validate_service_spec(spec: &ServiceSpec) -> ValidationReport {
    let mut report = ValidationReport::default();

    if !is_slug(&spec.name) {
        report.push("name", "must match [a-z][a-z0-9-]*");
    }
    if spec.name.len() > MAX_SERVICE_NAME_LEN {
        report.push(
            "name",
            format!("longer than {MAX_SERVICE_NAME_LEN} characters"),
        );
    }
    if spec.version.parse::<Version>().is_err() {
        report.push(
            "version",
            "must be major.minor.patch with numeric components",
        );
    }
    if spec.web_entry && spec.ports.is_empty() {
        report.push("ports", "web_entry requires at least one port");
    }
    for (i, port) in spec.ports.iter().enumerate() {
        if *port == 0 {
            report.push(format!("ports[{i}]"), "port 0 is not allowed");
        }
    }

    check_fields(&mut report, "schema.inputs", &spec.schema.inputs);
    check_fields(&mut report, "schema.outputs", &spec.schema.outputs);

    for (key, template) in &spec.env_template {
        if !is_env_name(key) {
            report.push(
                format!("env_template.{key}"),
                "invalid environment variable name",
            );
        }
        match segments(template) {
            Err(()) => report.push(format!("env_template.{key}"), "unterminated placeholder"),
            Ok(segs) => {
                for seg in segs {
                    match seg {
                        Segment::Slot(Placeholder::Input(field))
                            if spec.schema.input(field).is_none() =>
                        {
                            report.push("env_template", format!("unknown input '{field}'"));
                        }
                        Segment::Slot(Placeholder::Unknown(other)) => {
                            report.push("env_template", format!("unknown placeholder '{other}'"));
                        }
                        _ => {}
                    }
                }
            }
        }
    }

    if spec.constraints.gpu_count > 0 && !spec.constraints.required_labels.contains("gpu") {
        report.push("constraints", "gpu label missing");
    }

    let mut sidecar_names = BTreeSet::new();
    for (i, sidecar) in spec.sidecars.iter().enumerate() {
        let path = format!("sidecars[{i}].name");
        if !is_slug(&sidecar.name) {
            report.push(path.clone(), "must match [a-z][a-z0-9-]*");
        }
        if sidecar.name == "main" {
            report.push(path.clone(), "'main' is reserved");
        }
        if !sidecar_names.insert(sidecar.name.as_str()) {
            report.push(path, format!("duplicate sidecar '{}'", sidecar.name));
        }
    }

    if spec.policy.max_concurrent_entries == Limit::Finite(0) {
        report.push("policy.max_concurrent_entries", "must be positive");
    }
    if spec.policy.ttl_seconds == Some(0) {
        report.push("policy.ttl_seconds", "must be positive");
    }

    report
}

fn check_fields(report: &mut ValidationReport, path: &str, fields: &[FieldSpec]) {
    let mut seen = BTreeSet::new();
    for (i, field) in fields.iter().enumerate() {
        let at = format!("{path}[{i}]");
        if !is_field_name(&field.name) {
            report.push(format!("{at}.name"), "must match [a-z][a-z0-9_]*");
        }
        if !seen.insert(field.name.as_str()) {
            report.push(
                format!("{at}.name"),
                format!("duplicate field '{}'", field.name),
            );
        }
        if let Some(default) = &field.default {
            if field.required {
                report.push(
                    format!("{at}.default"),
                    "required fields cannot have a default",
                );
            }
            if !field.kind.accepts(default) {
                report.push(
                    format!("{at}.default"),
                    format!("expected {}, got {}", field.kind, default.type_name()),
                );
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("missing required input '{0}'")]
    MissingRequiredInput(String),
    #[error("input '{field}': expected {expected}, got {got}")]
    TypeMismatch {
        field: String,
        expected: FieldKind,
        got: String,
    },
    #[error("unknown input '{0}'")]
    UnknownInput(String),
    #[error("invalid service spec: {0}")]
    InvalidSpec(ValidationReport),
}

/// Expands `spec.env_template` against `inputs`.
///
/// Optional inputs fall back to their default, or to the empty string when
/// they have none. Input values may not themselves contain template braces,
/// so the result never carries an unexpanded placeholder.
pub fn render_launch_payload(
    spec: &ServiceSpec,
    inputs: &BTreeMap<String, Literal>,
    event_token: &str,
    entry_id: &str,
) -> Result<LaunchPayload, RenderError> {
    let report = validate_service_spec(spec);
    if !report.is_ok() {
        return Err(RenderError::InvalidSpec(report));
    }
    if let Some(unknown) = inputs.keys().find(|k| spec.schema.input(k).is_none()) {
        return Err(RenderError::UnknownInput(unknown.clone()));
    }

    let mut values: BTreeMap<&str, (String, FieldKind)> = BTreeMap::new();
    for field in &spec.schema.inputs {
        let value = match inputs.get(&field.name) {
            Some(v) => {
                if !field.kind.accepts(v) {
                    return Err(RenderError::TypeMismatch {
                        field: field.name.clone(),
                        expected: field.kind,
                        got: v.type_name().into(),
                    });
                }
                let rendered = v.render();
                if rendered.contains("{{") || rendered.contains("}}") {
                    return Err(RenderError::TypeMismatch {
                        field: field.name.clone(),
                        expected: field.kind,
                        got: "template text".into(),
                    });
                }
                rendered
            }
            None if field.required => {
                return Err(RenderError::MissingRequiredInput(field.name.clone()))
            }
            None => field
                .default
                .as_ref()
                .map(Literal::render)
                .unwrap_or_default(),
        };
        values.insert(field.name.as_str(), (value, field.kind));
    }

    let mut resolved_env = BTreeMap::new();
    let mut secret_env = BTreeSet::new();
    for (key, template) in &spec.env_template {
        // Validation already rejected unterminated and unknown slots.
        let segs = segments(template).unwrap_or_default();
        let mut out = String::with_capacity(template.len());
        for seg in segs {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(Placeholder::EventToken) => out.push_str(event_token),
                Segment::Slot(Placeholder::Input(field)) => {
                    if let Some((value, kind)) = values.get(field) {
                        if *kind == FieldKind::Secret {
                            secret_env.insert(key.clone());
                        }
                        out.push_str(value);
                    }
                }
                Segment::Slot(Placeholder::Unknown(_)) => {}
            }
        }
        resolved_env.insert(key.clone(), out);
    }

    Ok(LaunchPayload {
        service: spec.service_ref(),
        image_ref: spec.image_ref.clone(),
        command: spec.command.clone(),
        resolved_env,
        secret_env,
        ports: spec.ports.clone(),
        sidecars: spec.sidecars.clone(),
        constraints: spec.constraints.clone(),
        web_entry: spec.web_entry,
        event_token: event_token.into(),
        entry_id: entry_id.into(),
        attempt: 0,
    })
}

/// Whether any env template of `spec` references `{{event.token}}`.
pub fn references_event_token(spec: &ServiceSpec) -> bool {
    spec.env_template.values().any(|t| {
        segments(t)
            .map(|segs| segs.contains(&Segment::Slot(Placeholder::EventToken)))
            .unwrap_or(false)
    })
}

/// Input names referenced by the environment template, in template order.
pub fn referenced_inputs(spec: &ServiceSpec) -> Vec<String> {
    let mut out = Vec::new();
    for template in spec.env_template.values() {
        for seg in segments(template).unwrap_or_default() {
            if let Segment::Slot(Placeholder::Input(f)) = seg {
                if !out.iter().any(|o: &String| o == f) {
                    out.push(f.into());
                }
            }
        }
    }
    out
}
