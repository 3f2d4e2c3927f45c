//! Package registry: validates packages, resolves class inheritance and
//! enforces access modifiers.
//!
//! Names inside a package are simple identifiers without dots; references
//! across packages use `package.name`. Builtin functions live in the
//! reserved `builtin` package (`builtin.new`, `builtin.get`,
//! `builtin.update`, `builtin.delete`).
//!
//! The catalog is an immutable snapshot swapped atomically on every apply.
//! Each apply revalidates every package against the candidate snapshot, so a
//! package is either fully replaced or not touched, and a re-apply can never
//! leave another package with a dangling reference.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ids::is_valid_identifier;

pub const BUILTIN_PACKAGE: &str = "builtin";
pub const MAX_INHERITANCE_DEPTH: usize = 16;
pub const MAX_FANOUT: usize = 256;

/// A simple name: a path-safe identifier without dots.
pub fn is_simple_name(s: &str) -> bool {
    is_valid_identifier(s) && !s.contains('.')
}

// ---------------------------------------------------------------------------
// Package file format

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum Access {
    #[default]
    #[serde(alias = "public")]
    Public,
    #[serde(alias = "internal")]
    Internal,
    #[serde(alias = "private")]
    Private,
}

impl fmt::Display for Access {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Access::Public => "PUBLIC",
            Access::Internal => "INTERNAL",
            Access::Private => "PRIVATE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FunctionKind {
    #[serde(alias = "builtin")]
    Builtin,
    #[serde(alias = "task")]
    Task,
    #[serde(alias = "macro")]
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BuiltinId {
    #[serde(alias = "new")]
    New,
    #[serde(alias = "get")]
    Get,
    #[serde(alias = "update")]
    Update,
    #[serde(alias = "delete")]
    Delete,
}

impl BuiltinId {
    pub const ALL: [BuiltinId; 4] = [BuiltinId::New, BuiltinId::Get, BuiltinId::Update, BuiltinId::Delete];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinId::New => "new",
            BuiltinId::Get => "get",
            BuiltinId::Update => "update",
            BuiltinId::Delete => "delete",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PackageSpec {
    pub name: String,
    #[serde(default)]
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub functions: Vec<FunctionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub state_keys: Vec<StateKeySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_schema_hint: Option<Value>,
    #[serde(default)]
    pub bindings: Vec<FunctionBinding>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct StateKeySpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FunctionBinding {
    pub name: String,
    #[serde(default)]
    pub access: Access,
    pub function: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FunctionSpec {
    pub name: String,
    pub kind: FunctionKind,
    /// Execution descriptor for TASK functions; opaque to the registry.
    #[serde(default, alias = "image", skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataflow: Option<DataflowSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<BuiltinId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DataflowSpec {
    #[serde(default)]
    pub steps: Vec<StepSpec>,
    #[serde(alias = "export")]
    pub export_var: String,
    /// Every step only creates output objects, so re-execution is idempotent.
    #[serde(default)]
    pub immutable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct StepSpec {
    #[serde(alias = "as")]
    pub output_var: String,
    /// `$self`, `$var` or, in a fan-out over a list variable, `$item`.
    pub target: String,
    /// Binding name on the target's class.
    pub function: String,
    /// Parameter name to literal or reference (`$self`, `$var`, `$args.x`, `$item`).
    #[serde(default, alias = "args")]
    pub arg_mapping: BTreeMap<String, String>,
    /// Fan-out source: `$var` for a list variable or `$var.field` for a JSON
    /// array in that object's document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foreach: Option<String>,
}

impl PackageSpec {
    /// Parses a YAML or JSON package document.
    pub fn parse(text: &str) -> Result<Self, RegistryError> {
        serde_yaml::from_str(text).map_err(|e| RegistryError::Parse(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// References inside dataflows

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ref {
    Literal(String),
    SelfObject,
    Arg(String),
    Var(String),
    Item,
    Field(String, String),
}

impl Ref {
    pub fn parse(s: &str) -> Ref {
        let Some(rest) = s.strip_prefix('$') else {
            return Ref::Literal(s.to_string());
        };
        match rest {
            "self" => Ref::SelfObject,
            "item" => Ref::Item,
            _ => match rest.split_once('.') {
                Some(("args", a)) => Ref::Arg(a.to_string()),
                Some((v, f)) => Ref::Field(v.to_string(), f.to_string()),
                None => Ref::Var(rest.to_string()),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Errors and results

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", content = "detail")]
pub enum RegistryError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid package: {0}")]
    Invalid(String),
    #[error("inheritance cycle: {0:?}")]
    Cycle(Vec<String>),
    #[error("inheritance chain of {class} deeper than {max}")]
    DepthExceeded { class: String, max: usize },
    #[error("access violation: dataflow of {class} step {step} calls {binding} ({rule})")]
    AccessViolation {
        class: String,
        step: String,
        binding: String,
        rule: Access,
    },
    #[error("unknown reference: {0}")]
    UnknownReference(String),
    #[error("deploying {function} failed: {cause}")]
    EngineDeploy { function: String, cause: String },
    #[error("not found: {0}")]
    NotFound(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegistrationReport {
    pub package: String,
    pub classes_registered: usize,
    pub functions_deployed: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResolvedStateKey {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_type: Option<String>,
    pub declared_by: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResolvedBinding {
    pub name: String,
    pub access: Access,
    /// Qualified function name.
    pub function: String,
    pub kind: FunctionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<BuiltinId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_class: Option<String>,
    pub declared_by: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResolvedClass {
    pub name: String,
    pub package: String,
    /// The class followed by its ancestors, nearest first.
    pub chain: Vec<String>,
    pub state_keys: Vec<ResolvedStateKey>,
    pub bindings: BTreeMap<String, ResolvedBinding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_schema_hint: Option<Value>,
}

impl ResolvedClass {
    pub fn binding(&self, name: &str) -> Option<&ResolvedBinding> {
        self.bindings.get(name)
    }

    pub fn has_state_key(&self, key: &str) -> bool {
        self.state_keys.iter().any(|k| k.name == key)
    }
}

/// Who is calling a binding.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CallerContext {
    /// None for callers outside any package.
    pub package: Option<String>,
    pub class: Option<String>,
    /// Set when the call is a dataflow step of this class.
    pub via_dataflow_of: Option<String>,
}

impl CallerContext {
    pub fn external() -> Self {
        Self::default()
    }

    pub fn dataflow_of(class: &str) -> Self {
        Self {
            package: Some(split_qualified(class).0.to_string()),
            class: Some(class.to_string()),
            via_dataflow_of: Some(class.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "camelCase")]
pub enum AccessDecision {
    Allow,
    Deny { rule: Access, reason: String },
}

impl AccessDecision {
    pub fn is_allowed(&self) -> bool {
        matches!(self, AccessDecision::Allow)
    }
}

/// PUBLIC: anyone. INTERNAL: callers in the target class's package.
/// PRIVATE: dataflow steps declared in the target class.
pub fn check_access(caller: &CallerContext, target_class: &str, binding: &ResolvedBinding) -> AccessDecision {
    match binding.access {
        Access::Public => AccessDecision::Allow,
        Access::Internal => {
            let pkg = split_qualified(target_class).0;
            if caller.package.as_deref() == Some(pkg) {
                AccessDecision::Allow
            } else {
                AccessDecision::Deny {
                    rule: Access::Internal,
                    reason: format!("{}.{} is internal to package {pkg}", target_class, binding.name),
                }
            }
        }
        Access::Private => {
            if caller.via_dataflow_of.as_deref() == Some(target_class) {
                AccessDecision::Allow
            } else {
                AccessDecision::Deny {
                    rule: Access::Private,
                    reason: format!(
                        "{}.{} is private to dataflows of {target_class}",
                        target_class, binding.name
                    ),
                }
            }
        }
    }
}

/// Splits `pkg.name`. A name without a dot has an empty package.
pub fn split_qualified(q: &str) -> (&str, &str) {
    q.split_once('.').unwrap_or(("", q))
}

fn qualify(pkg: &str, name: &str) -> String {
    if name.contains('.') {
        name.to_string()
    } else {
        format!("{pkg}.{name}")
    }
}

// ---------------------------------------------------------------------------
// Deployment hook

/// Per-engine registration hook that turns a TASK function into an
/// invocation endpoint.
#[async_trait]
pub trait FunctionDeployer: Send + Sync {
    async fn deploy(&self, qualified_name: &str, endpoint_spec: &str) -> Result<String, String>;
}

/// Records the endpoint spec unchanged as the endpoint.
pub struct PassthroughDeployer;

#[async_trait]
impl FunctionDeployer for PassthroughDeployer {
    async fn deploy(&self, _qualified_name: &str, endpoint_spec: &str) -> Result<String, String> {
        Ok(endpoint_spec.to_string())
    }
}

// ---------------------------------------------------------------------------
// Catalog

#[derive(Debug, Clone)]
struct PackageEntry {
    spec: PackageSpec,
    endpoints: BTreeMap<String, String>,
}

/// An immutable snapshot of every registered package.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    packages: BTreeMap<String, Arc<PackageEntry>>,
}

/// A function looked up by qualified name.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedFunction {
    pub qualified_name: String,
    pub kind: FunctionKind,
    pub builtin: Option<BuiltinId>,
    pub endpoint: Option<String>,
    pub dataflow: Option<DataflowSpec>,
}

impl Catalog {
    pub fn package_names(&self) -> Vec<String> {
        self.packages.keys().cloned().collect()
    }

    pub fn package(&self, name: &str) -> Option<&PackageSpec> {
        self.packages.get(name).map(|e| &e.spec)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.packages
            .iter()
            .flat_map(|(p, e)| e.spec.classes.iter().map(move |c| format!("{p}.{}", c.name)))
            .collect()
    }

    fn class_spec(&self, qualified: &str) -> Option<&ClassSpec> {
        let (pkg, name) = split_qualified(qualified);
        self.packages.get(pkg)?.spec.classes.iter().find(|c| c.name == name)
    }

    pub fn has_class(&self, qualified: &str) -> bool {
        self.class_spec(qualified).is_some()
    }

    pub fn function(&self, qualified: &str) -> Option<ResolvedFunction> {
        let (pkg, name) = split_qualified(qualified);
        if pkg == BUILTIN_PACKAGE {
            let b = BuiltinId::from_name(name)?;
            return Some(ResolvedFunction {
                qualified_name: qualified.to_string(),
                kind: FunctionKind::Builtin,
                builtin: Some(b),
                endpoint: None,
                dataflow: None,
            });
        }
        let entry = self.packages.get(pkg)?;
        let f = entry.spec.functions.iter().find(|f| f.name == name)?;
        Some(ResolvedFunction {
            qualified_name: qualified.to_string(),
            kind: f.kind,
            builtin: f.builtin,
            endpoint: entry.endpoints.get(name).cloned().or_else(|| f.endpoint.clone()),
            dataflow: f.dataflow.clone(),
        })
    }

    /// Flattens the inheritance chain of `qualified`.
    pub fn resolve_class(&self, qualified: &str) -> Result<ResolvedClass, RegistryError> {
        let mut chain: Vec<String> = Vec::new();
        let mut specs: Vec<&ClassSpec> = Vec::new();
        let mut cur = qualified.to_string();
        loop {
            let spec = self.class_spec(&cur).ok_or_else(|| {
                if chain.is_empty() {
                    RegistryError::NotFound(cur.clone())
                } else {
                    RegistryError::UnknownReference(format!("parent class {cur} of {}", chain[chain.len() - 1]))
                }
            })?;
            if let Some(pos) = chain.iter().position(|c| *c == cur) {
                let mut cycle = chain[pos..].to_vec();
                cycle.push(cur);
                return Err(RegistryError::Cycle(cycle));
            }
            chain.push(cur.clone());
            specs.push(spec);
            if chain.len() > MAX_INHERITANCE_DEPTH + 1 {
                return Err(RegistryError::DepthExceeded {
                    class: qualified.to_string(),
                    max: MAX_INHERITANCE_DEPTH,
                });
            }
            match &spec.parent {
                Some(p) => cur = qualify(split_qualified(&cur).0, p),
                None => break,
            }
        }

        let mut state_keys: Vec<ResolvedStateKey> = Vec::new();
        let mut bindings = BTreeMap::new();
        let mut hint = None;
        // root first, so nearer classes overlay
        for (class, spec) in chain.iter().zip(&specs).rev() {
            let pkg = split_qualified(class).0;
            for k in &spec.state_keys {
                let rk = ResolvedStateKey {
                    name: k.name.clone(),
                    content_type: k.content_type.clone(),
                    declared_by: class.clone(),
                };
                match state_keys.iter_mut().find(|e| e.name == k.name) {
                    Some(e) => *e = rk,
                    None => state_keys.push(rk),
                }
            }
            for b in &spec.bindings {
                let function = qualify(pkg, &b.function);
                let f = self
                    .function(&function)
                    .ok_or_else(|| RegistryError::UnknownReference(format!("function {function} bound by {class}")))?;
                bindings.insert(
                    b.name.clone(),
                    ResolvedBinding {
                        name: b.name.clone(),
                        access: b.access,
                        function,
                        kind: f.kind,
                        builtin: f.builtin,
                        output_class: b.output_class.as_ref().map(|o| qualify(pkg, o)),
                        declared_by: class.clone(),
                    },
                );
            }
            if spec.structured_schema_hint.is_some() {
                hint = spec.structured_schema_hint.clone();
            }
        }
        Ok(ResolvedClass {
            name: qualified.to_string(),
            package: split_qualified(qualified).0.to_string(),
            chain,
            state_keys,
            bindings,
            structured_schema_hint: hint,
        })
    }

    /// Checks every package against this snapshot.
    fn validate(&self) -> Result<(), RegistryError> {
        for (pkg, entry) in &self.packages {
            validate_shape(&entry.spec)?;
            for c in &entry.spec.classes {
                let q = format!("{pkg}.{}", c.name);
                let rc = self.resolve_class(&q)?;
                for b in rc.bindings.values() {
                    if let Some(o) = &b.output_class {
                        if !self.has_class(o) {
                            return Err(RegistryError::UnknownReference(format!(
                                "output class {o} of {q}.{}",
                                b.name
                            )));
                        }
                    }
                    if b.kind == FunctionKind::Macro {
                        let df = self
                            .function(&b.function)
                            .and_then(|f| f.dataflow)
                            .ok_or_else(|| RegistryError::Invalid(format!("macro {} has no dataflow", b.function)))?;
                        self.check_dataflow(&q, &b.name, &df)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Static check of a dataflow bound by `class`: references point to
    /// earlier steps and every step may call its binding.
    pub fn check_dataflow(&self, class: &str, binding: &str, df: &DataflowSpec) -> Result<(), RegistryError> {
        #[derive(Clone)]
        enum VarType {
            One(String),
            List(String),
        }
        let invalid = |msg: String| RegistryError::Invalid(format!("dataflow {class}.{binding}: {msg}"));
        let mut vars: HashMap<&str, VarType> = HashMap::new();
        let caller = CallerContext::dataflow_of(class);
        for step in &df.steps {
            if !is_simple_name(&step.output_var) || step.output_var == "self" || step.output_var == "item" || step.output_var == "args" {
                return Err(invalid(format!("bad output variable {:?}", step.output_var)));
            }
            if vars.contains_key(step.output_var.as_str()) {
                return Err(invalid(format!("variable {} assigned twice", step.output_var)));
            }
            let var_ref = |name: &str| -> Result<VarType, RegistryError> {
                vars.get(name).cloned().ok_or_else(|| {
                    RegistryError::UnknownReference(format!(
                        "dataflow {class}.{binding} step {}: ${name} is not an earlier step",
                        step.output_var
                    ))
                })
            };
            // fan-out source decides what $item means
            let item_class = match step.foreach.as_deref().map(Ref::parse) {
                None => None,
                Some(Ref::Var(v)) => match var_ref(&v)? {
                    VarType::List(c) => Some(Some(c)),
                    VarType::One(_) => return Err(invalid(format!("foreach ${v} is not a list"))),
                },
                Some(Ref::Field(v, _)) => match var_ref(&v)? {
                    VarType::One(_) => Some(None),
                    VarType::List(_) => return Err(invalid(format!("foreach over a field of list ${v}"))),
                },
                Some(other) => return Err(invalid(format!("bad foreach source {other:?}"))),
            };
            let target_class = match Ref::parse(&step.target) {
                Ref::SelfObject => class.to_string(),
                Ref::Var(v) => match var_ref(&v)? {
                    VarType::One(c) => c,
                    VarType::List(_) => return Err(invalid(format!("target ${v} is a list; use foreach"))),
                },
                Ref::Item => match &item_class {
                    Some(Some(c)) => c.clone(),
                    _ => return Err(invalid("$item target needs foreach over a list".into())),
                },
                other => return Err(invalid(format!("bad target {other:?}"))),
            };
            for (param, value) in &step.arg_mapping {
                match Ref::parse(value) {
                    Ref::Literal(_) | Ref::SelfObject | Ref::Arg(_) => {}
                    Ref::Var(v) | Ref::Field(v, _) => {
                        var_ref(&v)?;
                    }
                    Ref::Item if item_class.is_some() => {}
                    Ref::Item => return Err(invalid(format!("argument {param} uses $item outside foreach"))),
                }
            }
            let target = self.resolve_class(&target_class)?;
            let b = target.binding(&step.function).ok_or_else(|| {
                RegistryError::UnknownReference(format!(
                    "dataflow {class}.{binding} step {}: {target_class} has no binding {}",
                    step.output_var, step.function
                ))
            })?;
            if let AccessDecision::Deny { rule, .. } = check_access(&caller, &target_class, b) {
                return Err(RegistryError::AccessViolation {
                    class: class.to_string(),
                    step: step.output_var.clone(),
                    binding: format!("{target_class}.{}", step.function),
                    rule,
                });
            }
            if df.immutable && b.output_class.is_none() {
                return Err(invalid(format!(
                    "immutable flow step {} calls {} which creates no output object",
                    step.output_var, step.function
                )));
            }
            let out = b.output_class.clone().unwrap_or(target_class);
            vars.insert(
                &step.output_var,
                if item_class.is_some() {
                    VarType::List(out)
                } else {
                    VarType::One(out)
                },
            );
        }
        if !vars.contains_key(df.export_var.as_str()) {
            return Err(RegistryError::UnknownReference(format!(
                "dataflow {class}.{binding}: export variable {} is not a step output",
                df.export_var
            )));
        }
        Ok(())
    }
}

/// Checks names, uniqueness and kind/field agreement within one package.
fn validate_shape(p: &PackageSpec) -> Result<(), RegistryError> {
    let invalid = |m: String| RegistryError::Invalid(format!("package {}: {m}", p.name));
    if !is_simple_name(&p.name) {
        return Err(RegistryError::Invalid(format!("bad package name {:?}", p.name)));
    }
    if p.name == BUILTIN_PACKAGE {
        return Err(invalid("package name is reserved".into()));
    }
    let mut seen = BTreeSet::new();
    for c in &p.classes {
        if !is_simple_name(&c.name) {
            return Err(invalid(format!("bad class name {:?}", c.name)));
        }
        if !seen.insert(c.name.as_str()) {
            return Err(invalid(format!("duplicate class {}", c.name)));
        }
        let mut keys = BTreeSet::new();
        for k in &c.state_keys {
            if !is_simple_name(&k.name) || !keys.insert(k.name.as_str()) {
                return Err(invalid(format!("bad or duplicate state key {:?} in {}", k.name, c.name)));
            }
        }
        let mut names = BTreeSet::new();
        for b in &c.bindings {
            if !is_simple_name(&b.name) || !names.insert(b.name.as_str()) {
                return Err(invalid(format!("bad or duplicate binding {:?} in {}", b.name, c.name)));
            }
        }
    }
    let mut seen = BTreeSet::new();
    for f in &p.functions {
        if !is_simple_name(&f.name) {
            return Err(invalid(format!("bad function name {:?}", f.name)));
        }
        if !seen.insert(f.name.as_str()) {
            return Err(invalid(format!("duplicate function {}", f.name)));
        }
        let populated = (f.endpoint.is_some(), f.dataflow.is_some(), f.builtin.is_some());
        let ok = match f.kind {
            FunctionKind::Task => populated == (true, false, false),
            FunctionKind::Macro => populated == (false, true, false),
            FunctionKind::Builtin => populated == (false, false, true),
        };
        if !ok {
            return Err(invalid(format!(
                "function {} of kind {:?} must set exactly its own descriptor",
                f.name, f.kind
            )));
        }
        if let Some(df) = &f.dataflow {
            for s in &df.steps {
                if s.foreach.is_none() && s.target == "$item" {
                    return Err(invalid(format!("step {} targets $item without foreach", s.output_var)));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Registry

pub struct Registry {
    catalog: RwLock<Arc<Catalog>>,
    deployer: Arc<dyn FunctionDeployer>,
    apply_lock: tokio::sync::Mutex<()>,
}

impl Registry {
    pub fn new(deployer: Arc<dyn FunctionDeployer>) -> Self {
        Self {
            catalog: RwLock::new(Arc::new(Catalog::default())),
            deployer,
            apply_lock: tokio::sync::Mutex::new(()),
        }
    }

    /// Consistent snapshot of the catalog.
    pub fn catalog(&self) -> Arc<Catalog> {
        self.catalog.read().clone()
    }

    pub fn resolve_class(&self, qualified: &str) -> Result<ResolvedClass, RegistryError> {
        self.catalog().resolve_class(qualified)
    }

    pub async fn apply_text(&self, text: &str) -> Result<RegistrationReport, RegistryError> {
        self.apply_package(PackageSpec::parse(text)?).await
    }

    /// Validates `spec` against the registry, deploys its TASK functions and
    /// swaps it in. Nothing changes if any step fails.
    pub async fn apply_package(&self, spec: PackageSpec) -> Result<RegistrationReport, RegistryError> {
        let _guard = self.apply_lock.lock().await;
        let current = self.catalog();
        let mut candidate = (*current).clone();
        candidate.packages.insert(
            spec.name.clone(),
            Arc::new(PackageEntry {
                spec: spec.clone(),
                endpoints: BTreeMap::new(),
            }),
        );
        candidate.validate()?;

        let mut endpoints = BTreeMap::new();
        for f in spec.functions.iter().filter(|f| f.kind == FunctionKind::Task) {
            let q = format!("{}.{}", spec.name, f.name);
            let ep = self
                .deployer
                .deploy(&q, f.endpoint.as_deref().unwrap_or_default())
                .await
                .map_err(|cause| RegistryError::EngineDeploy {
                    function: q.clone(),
                    cause,
                })?;
            endpoints.insert(f.name.clone(), ep);
        }
        let deployed = endpoints.len();
        candidate.packages.insert(
            spec.name.clone(),
            Arc::new(PackageEntry {
                spec: spec.clone(),
                endpoints,
            }),
        );

        let mut warnings = Vec::new();
        if spec.classes.is_empty() && spec.functions.is_empty() {
            warnings.push("empty package".to_string());
        }
        let bound: BTreeSet<String> = spec
            .classes
            .iter()
            .flat_map(|c| c.bindings.iter().map(|b| qualify(&spec.name, &b.function)))
            .collect();
        for f in &spec.functions {
            if !bound.contains(&format!("{}.{}", spec.name, f.name)) {
                warnings.push(format!("function {} is not bound by any class in this package", f.name));
            }
        }
        *self.catalog.write() = Arc::new(candidate);
        tracing::info!(package = %spec.name, deployed, "package applied");
        Ok(RegistrationReport {
            package: spec.name.clone(),
            classes_registered: spec.classes.len(),
            functions_deployed: deployed,
            warnings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn registry() -> Registry {
        Registry::new(Arc::new(PassthroughDeployer))
    }

    const VIDEO: &str = r#"
name: media
classes:
  - name: video
    stateKeys:
      - name: mp4
        contentType: video/mp4
    bindings:
      - name: new
        function: builtin.new
      - name: transcode
        access: PUBLIC
        function: transcode
        outputClass: video
functions:
  - name: transcode
    kind: TASK
    image: ghcr.io/example/transcode:latest
"#;

    #[tokio::test]
    async fn video_package_registers_one_class_one_task() {
        let r = registry();
        let rep = r.apply_text(VIDEO).await.unwrap();
        assert_eq!(rep.classes_registered, 1);
        assert_eq!(rep.functions_deployed, 1);
        assert!(rep.warnings.is_empty());
        let c = r.resolve_class("media.video").unwrap();
        assert_eq!(c.state_keys.iter().map(|k| k.name.as_str()).collect::<Vec<_>>(), ["mp4"]);
        let kinds: Vec<(&str, FunctionKind)> = c.bindings.values().map(|b| (b.name.as_str(), b.kind)).collect();
        assert_eq!(kinds, [("new", FunctionKind::Builtin), ("transcode", FunctionKind::Task)]);
        assert_eq!(c.bindings["transcode"].output_class.as_deref(), Some("media.video"));
        let f = r.catalog().function("media.transcode").unwrap();
        assert_eq!(f.endpoint.as_deref(), Some("ghcr.io/example/transcode:latest"));
    }

    #[tokio::test]
    async fn empty_package_warns() {
        let r = registry();
        let rep = r.apply_text("name: nothing").await.unwrap();
        assert_eq!((rep.classes_registered, rep.functions_deployed), (0, 0));
        assert_eq!(rep.warnings, vec!["empty package".to_string()]);
    }

    #[tokio::test]
    async fn json_packages_parse_too() {
        let r = registry();
        let rep = r
            .apply_text(r#"{"name":"j","classes":[{"name":"c","bindings":[{"name":"get","function":"builtin.get"}]}]}"#)
            .await
            .unwrap();
        assert_eq!(rep.classes_registered, 1);
    }

    const CHAIN: &str = r#"
name: p
classes:
  - name: A
    stateKeys: [{name: k1}, {name: shared, contentType: text/plain}]
    bindings:
      - {name: f, function: fa}
      - {name: g, function: ga}
  - name: B
    parent: A
    stateKeys: [{name: shared, contentType: application/json}]
    bindings:
      - {name: f, function: fb}
  - name: C
    parent: B
    bindings:
      - {name: h, function: hc}
functions:
  - {name: fa, kind: TASK, endpoint: "inline://fa"}
  - {name: ga, kind: TASK, endpoint: "inline://ga"}
  - {name: fb, kind: TASK, endpoint: "inline://fb"}
  - {name: hc, kind: TASK, endpoint: "inline://hc"}
"#;

    #[tokio::test]
    async fn chain_overlay_matches_manual_oracle() {
        let r = registry();
        r.apply_text(CHAIN).await.unwrap();
        let c = r.resolve_class("p.C").unwrap();
        let got: Vec<(String, String)> = c
            .bindings
            .values()
            .map(|b| (b.name.clone(), b.function.clone()))
            .collect();
        // manual overlay: A{f,g}, B overrides f, C adds h
        let want = vec![
            ("f".to_string(), "p.fb".to_string()),
            ("g".to_string(), "p.ga".to_string()),
            ("h".to_string(), "p.hc".to_string()),
        ];
        assert_eq!(got, want);
        assert_eq!(c.chain, ["p.C", "p.B", "p.A"]);
        let shared = c.state_keys.iter().find(|k| k.name == "shared").unwrap();
        assert_eq!(shared.declared_by, "p.B");
        assert_eq!(c.state_keys.len(), 2);

        let a = r.resolve_class("p.A").unwrap();
        let declared: BTreeSet<&str> = ["f", "g"].into();
        assert_eq!(a.bindings.keys().map(|s| s.as_str()).collect::<BTreeSet<_>>(), declared);
        assert!(matches!(r.resolve_class("p.Z"), Err(RegistryError::NotFound(_))));
    }

    #[tokio::test]
    async fn reapply_is_idempotent() {
        let r = registry();
        let a = r.apply_text(CHAIN).await.unwrap();
        let ca = r.resolve_class("p.C").unwrap();
        let b = r.apply_text(CHAIN).await.unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, r.resolve_class("p.C").unwrap());
    }

    #[tokio::test]
    async fn cycles_and_depth_rejected() {
        let r = registry();
        let cyc = "name: p\nclasses:\n  - {name: A, parent: B}\n  - {name: B, parent: A}\n";
        assert!(matches!(r.apply_text(cyc).await, Err(RegistryError::Cycle(_))));
        let selfp = "name: p\nclasses:\n  - {name: A, parent: A}\n";
        assert!(matches!(r.apply_text(selfp).await, Err(RegistryError::Cycle(_))));

        let mut deep = String::from("name: d\nclasses:\n  - {name: c0}\n");
        for i in 1..=MAX_INHERITANCE_DEPTH {
            deep.push_str(&format!("  - {{name: c{i}, parent: c{}}}\n", i - 1));
        }
        r.apply_text(&deep).await.unwrap();
        deep.push_str(&format!(
            "  - {{name: c{}, parent: c{}}}\n",
            MAX_INHERITANCE_DEPTH + 1,
            MAX_INHERITANCE_DEPTH
        ));
        assert!(matches!(r.apply_text(&deep).await, Err(RegistryError::DepthExceeded { .. })));
        // failed apply left the previous version in place
        assert_eq!(r.catalog().package("d").unwrap().classes.len(), MAX_INHERITANCE_DEPTH + 1);
    }

    #[tokio::test]
    async fn unknown_references_rejected() {
        let r = registry();
        for bad in [
            "name: p\nclasses:\n  - {name: A, parent: other.X}\n",
            "name: p\nclasses:\n  - {name: A, bindings: [{name: f, function: nope}]}\n",
            "name: p\nclasses:\n  - {name: A, bindings: [{name: f, function: builtin.frobnicate}]}\n",
            "name: p\nclasses:\n  - {name: A, bindings: [{name: n, function: builtin.new, outputClass: Missing}]}\n",
        ] {
            assert!(matches!(r.apply_text(bad).await, Err(RegistryError::UnknownReference(_))), "{bad}");
        }
        assert!(r.catalog().package_names().is_empty());
    }

    #[tokio::test]
    async fn cross_package_parent_and_dependents_protected() {
        let r = registry();
        r.apply_text("name: base\nclasses:\n  - {name: A, bindings: [{name: get, function: builtin.get}]}\n")
            .await
            .unwrap();
        r.apply_text("name: app\nclasses:\n  - {name: B, parent: base.A}\n").await.unwrap();
        assert_eq!(r.resolve_class("app.B").unwrap().bindings["get"].declared_by, "base.A");
        // removing A would orphan app.B
        let err = r.apply_text("name: base\nclasses: []\n").await.unwrap_err();
        assert!(matches!(err, RegistryError::UnknownReference(_)));
        assert!(r.catalog().has_class("base.A"));
    }

    #[tokio::test]
    async fn shape_errors() {
        let r = registry();
        for bad in [
            "name: builtin\n",
            "name: a.b\n",
            "name: p\nclasses: [{name: A}, {name: A}]\n",
            "name: p\nfunctions: [{name: f, kind: TASK}]\n",
            "name: p\nfunctions: [{name: f, kind: BUILTIN, builtin: NEW, endpoint: x}]\n",
            "name: p\nclasses: [{name: A, bindings: [{name: f, function: builtin.get}, {name: f, function: builtin.new}]}]\n",
        ] {
            assert!(matches!(r.apply_text(bad).await, Err(RegistryError::Invalid(_))), "{bad}");
        }
        assert!(matches!(r.apply_text("name: p\nbogus: 1\n").await, Err(RegistryError::Parse(_))));
    }

    fn binding(access: Access) -> ResolvedBinding {
        ResolvedBinding {
            name: "f".into(),
            access,
            function: "q.f".into(),
            kind: FunctionKind::Task,
            builtin: None,
            output_class: None,
            declared_by: "q.X".into(),
        }
    }

    #[test]
    fn access_matrix() {
        // rows: external, same package other class, dataflow of the target class
        let callers = [
            CallerContext::external(),
            CallerContext {
                package: Some("q".into()),
                class: Some("q.Y".into()),
                via_dataflow_of: Some("q.Y".into()),
            },
            CallerContext::dataflow_of("q.X"),
        ];
        let expected = [
            [true, false, false],
            [true, true, false],
            [true, true, true],
        ];
        for (ci, caller) in callers.iter().enumerate() {
            for (ai, access) in [Access::Public, Access::Internal, Access::Private].into_iter().enumerate() {
                let d = check_access(caller, "q.X", &binding(access));
                assert_eq!(d.is_allowed(), expected[ci][ai], "caller {ci} access {access}");
                if let AccessDecision::Deny { rule, .. } = d {
                    assert_eq!(rule, access);
                }
            }
        }
        // another package is denied INTERNAL
        let other = CallerContext::dataflow_of("p.Z");
        assert_eq!(
            check_access(&other, "q.X", &binding(Access::Internal)),
            AccessDecision::Deny {
                rule: Access::Internal,
                reason: "q.X.f is internal to package q".into()
            }
        );
    }

    const FLOWS: &str = r#"
name: p
classes:
  - name: X
    bindings:
      - {name: secret, access: PRIVATE, function: t, outputClass: X}
      - {name: own, function: flow}
  - name: Y
    bindings:
      - {name: viaOther, function: flow2}
functions:
  - {name: t, kind: TASK, endpoint: "inline://t"}
  - name: flow
    kind: MACRO
    dataflow:
      steps:
        - {outputVar: a, target: $self, function: secret}
      exportVar: a
  - name: flow2
    kind: MACRO
    dataflow:
      steps:
        - {outputVar: x, target: $self, function: make}
        - {outputVar: a, target: $x, function: secret}
      exportVar: a
"#;

    #[tokio::test]
    async fn private_cross_class_dataflow_rejected_at_registration() {
        let r = registry();
        // Y's flow creates an X and calls its private binding
        let bad = FLOWS.replace(
            "      - {name: viaOther, function: flow2}",
            "      - {name: viaOther, function: flow2}\n      - {name: make, function: builtin.new, outputClass: X}",
        );
        let err = r.apply_text(&bad).await.unwrap_err();
        assert_eq!(
            err,
            RegistryError::AccessViolation {
                class: "p.Y".into(),
                step: "a".into(),
                binding: "p.X.secret".into(),
                rule: Access::Private
            }
        );
        // without Y the same-class private call is fine
        let ok = FLOWS
            .replace("  - name: Y\n    bindings:\n      - {name: viaOther, function: flow2}\n", "");
        r.apply_text(&ok).await.unwrap();
    }

    #[tokio::test]
    async fn dataflow_reference_rules() {
        let r = registry();
        let pkg = |steps: &str, export: &str| {
            format!(
                "name: p\nclasses:\n  - name: X\n    bindings:\n      - {{name: f, function: t, outputClass: X}}\n      - {{name: m, function: flow}}\nfunctions:\n  - {{name: t, kind: TASK, endpoint: \"inline://t\"}}\n  - name: flow\n    kind: MACRO\n    dataflow:\n      exportVar: {export}\n      steps:\n{steps}"
            )
        };
        let ok = pkg(
            "        - {outputVar: a, target: $self, function: f}\n        - {outputVar: b, target: $a, function: f, args: {x: $a, y: $args.n, z: lit}}\n",
            "b",
        );
        r.apply_text(&ok).await.unwrap();
        let forward = pkg(
            "        - {outputVar: a, target: $b, function: f}\n        - {outputVar: b, target: $self, function: f}\n",
            "b",
        );
        assert!(matches!(r.apply_text(&forward).await, Err(RegistryError::UnknownReference(_))));
        let bad_export = pkg("        - {outputVar: a, target: $self, function: f}\n", "zz");
        assert!(matches!(r.apply_text(&bad_export).await, Err(RegistryError::UnknownReference(_))));
        let twice = pkg(
            "        - {outputVar: a, target: $self, function: f}\n        - {outputVar: a, target: $self, function: f}\n",
            "a",
        );
        assert!(matches!(r.apply_text(&twice).await, Err(RegistryError::Invalid(_))));
        let fanout = pkg(
            "        - {outputVar: a, target: $self, function: f}\n        - {outputVar: b, target: $self, function: f, foreach: $a.parts, args: {seg: $item}}\n        - {outputVar: c, target: $item, function: f, foreach: $b}\n        - {outputVar: d, target: $self, function: f, args: {all: $c}}\n",
            "d",
        );
        r.apply_text(&fanout).await.unwrap();
        let list_target = pkg(
            "        - {outputVar: a, target: $self, function: f, foreach: $self.parts}\n        - {outputVar: b, target: $a, function: f}\n",
            "b",
        );
        assert!(r.apply_text(&list_target).await.is_err());
    }

    #[tokio::test]
    async fn immutable_flow_steps_must_create_outputs() {
        let r = registry();
        let text = "name: p\nclasses:\n  - name: X\n    bindings:\n      - {name: mut, function: t}\n      - {name: m, function: flow}\nfunctions:\n  - {name: t, kind: TASK, endpoint: \"inline://t\"}\n  - name: flow\n    kind: MACRO\n    dataflow:\n      immutable: true\n      exportVar: a\n      steps:\n        - {outputVar: a, target: $self, function: mut}\n";
        assert!(matches!(r.apply_text(text).await, Err(RegistryError::Invalid(_))));
    }

    struct FailingDeployer;

    #[async_trait]
    impl FunctionDeployer for FailingDeployer {
        async fn deploy(&self, q: &str, _: &str) -> Result<String, String> {
            Err(format!("cannot start {q}"))
        }
    }

    #[tokio::test]
    async fn deploy_failure_is_atomic() {
        let r = Registry::new(Arc::new(FailingDeployer));
        let err = r.apply_text(VIDEO).await.unwrap_err();
        assert!(matches!(err, RegistryError::EngineDeploy { .. }));
        assert!(r.catalog().package_names().is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        // resolution is independent of the order ancestor packages were applied
        #[test]
        fn resolution_independent_of_registration_order(order in Just(vec![0usize, 1, 2]).prop_shuffle()) {
            let pkgs = [
                "name: a\nclasses:\n  - {name: A, bindings: [{name: f, function: builtin.get}, {name: g, function: builtin.new}]}\n",
                "name: b\nclasses:\n  - {name: B, bindings: [{name: f, function: builtin.update}]}\n",
                "name: c\nclasses:\n  - {name: C, bindings: [{name: h, function: builtin.delete}]}\n",
            ];
            let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
            let r = registry();
            rt.block_on(async {
                for i in &order {
                    r.apply_text(pkgs[*i]).await.unwrap();
                }
                // re-parent after all three exist
                r.apply_text("name: b\nclasses:\n  - {name: B, parent: a.A, bindings: [{name: f, function: builtin.update}]}\n").await.unwrap();
                r.apply_text("name: c\nclasses:\n  - {name: C, parent: b.B, bindings: [{name: h, function: builtin.delete}]}\n").await.unwrap();
            });
            let c = r.resolve_class("c.C").unwrap();
            let got: Vec<(&str, &str)> = c.bindings.values().map(|b| (b.name.as_str(), b.function.as_str())).collect();
            prop_assert_eq!(got, vec![("f", "builtin.update"), ("g", "builtin.new"), ("h", "builtin.delete")]);
        }
    }
}
