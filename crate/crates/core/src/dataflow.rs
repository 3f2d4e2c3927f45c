//! Dataflow (macro) execution.
//!
//! Steps are grouped into layers by longest dependency path and each layer
//! runs with bounded concurrency. Every step becomes an ordinary invocation
//! with a deterministic id derived from the run id, and its output object id
//! is fixed before it runs. Progress is kept in a run-state object, so a run
//! that is replayed with the same id skips finished steps; in an immutable
//! flow a step whose output object already exists is skipped as well.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::grid::GridError;
use crate::ids::{InvocationId, ObjectId};
use crate::invoker::{InvocationEnvelope, InvocationResult, InvokeError, Invoker, Mode};
use crate::record::ObjectRecord;
use crate::registry::{CallerContext, DataflowSpec, Ref, ResolvedBinding, ResolvedClass, StepSpec};

pub const DEFAULT_LAYER_CONCURRENCY: usize = 8;
pub const MAX_FANOUT: usize = 256;
/// Class of run-state objects.
pub const RUN_CLASS: &str = "_dataflow_run";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StepState {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct StepProgress {
    state: StepState,
    /// Objects the step variable names; several for a fan-out.
    #[serde(default)]
    objects: Vec<ObjectId>,
    #[serde(default)]
    list: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct RunState {
    #[serde(default)]
    steps: BTreeMap<String, StepProgress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    result: Option<InvocationResult>,
}

pub fn run_object_id(run: &InvocationId) -> ObjectId {
    ObjectId::new(format!("{run}-run")).expect("derived id is valid")
}

pub fn step_invocation_id(run: &InvocationId, idx: usize, item: Option<usize>) -> InvocationId {
    let s = match item {
        Some(j) => format!("{run}-s{idx}-{j}"),
        None => format!("{run}-s{idx}"),
    };
    InvocationId::new(s).expect("derived id is valid")
}

pub fn step_output_id(run: &InvocationId, idx: usize, item: Option<usize>) -> ObjectId {
    ObjectId::new(format!("{}-out", step_invocation_id(run, idx, item))).expect("derived id is valid")
}

/// Layer of every step: 0 for steps without dependencies, otherwise one more
/// than the deepest step it reads from.
pub fn layers(df: &DataflowSpec) -> Vec<usize> {
    let index: HashMap<&str, usize> = df
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| (s.output_var.as_str(), i))
        .collect();
    let mut layer = vec![0usize; df.steps.len()];
    for (i, s) in df.steps.iter().enumerate() {
        layer[i] = dependencies(s)
            .iter()
            .filter_map(|d| index.get(d.as_str()))
            .filter(|&&j| j < i)
            .map(|&j| layer[j] + 1)
            .max()
            .unwrap_or(0);
    }
    layer
}

fn dependencies(s: &StepSpec) -> Vec<String> {
    let mut refs: Vec<&str> = vec![s.target.as_str()];
    refs.extend(s.foreach.as_deref());
    refs.extend(s.arg_mapping.values().map(String::as_str));
    refs.into_iter()
        .filter_map(|r| match Ref::parse(r) {
            Ref::Var(v) | Ref::Field(v, _) => Some(v),
            _ => None,
        })
        .collect()
}

/// One unit of work: a step, or one item of a fan-out step.
struct Unit {
    env: InvocationEnvelope,
    /// Object the step variable names afterwards.
    names: ObjectId,
}

struct Run<'a> {
    invoker: &'a Arc<Invoker>,
    env: &'a InvocationEnvelope,
    class: &'a ResolvedClass,
    df: &'a DataflowSpec,
    state: RunState,
    state_revision: u64,
}

/// Executes the dataflow bound as `binding` on `env.target_object_id`.
pub async fn execute(
    invoker: &Arc<Invoker>,
    env: InvocationEnvelope,
    class: ResolvedClass,
    binding: ResolvedBinding,
) -> Result<InvocationResult, InvokeError> {
    let df = invoker
        .deps()
        .registry
        .catalog()
        .function(&binding.function)
        .and_then(|f| f.dataflow)
        .ok_or_else(|| InvokeError::NotFound(format!("dataflow {}", binding.function)))?;
    invoker.crash_point(&env)?;
    match invoker.grid().get(&env.target_object_id).await {
        Ok(r) if !r.tombstone => {}
        Ok(_) | Err(GridError::NotFound(_)) => {
            return Err(InvokeError::NotFound(format!("object {}", env.target_object_id)))
        }
        Err(e) => return Err(e.into()),
    }
    let (state, state_revision) = load_state(invoker, &env.invocation_id).await?;
    if let Some(mut done) = state.result.clone() {
        done.skipped = true;
        return Ok(done);
    }
    let mut run = Run {
        invoker,
        env: &env,
        class: &class,
        df: &df,
        state,
        state_revision,
    };
    run.execute().await
}

async fn load_state(invoker: &Invoker, run: &InvocationId) -> Result<(RunState, u64), InvokeError> {
    match invoker.grid().get(&run_object_id(run)).await {
        Ok(r) => Ok((serde_json::from_value(r.doc).unwrap_or_default(), r.revision)),
        Err(GridError::NotFound(_)) => Ok((RunState::default(), 0)),
        Err(e) => Err(e.into()),
    }
}

impl Run<'_> {
    async fn execute(&mut self) -> Result<InvocationResult, InvokeError> {
        let layer_of = layers(self.df);
        let depth = layer_of.iter().max().map_or(0, |m| m + 1);
        for layer in 0..depth {
            let idxs: Vec<usize> = (0..self.df.steps.len()).filter(|&i| layer_of[i] == layer).collect();
            let mut units: Vec<(usize, Vec<Unit>)> = Vec::new();
            for &i in &idxs {
                let var = &self.df.steps[i].output_var;
                if self.state.steps.get(var).is_some_and(|p| p.state == StepState::Done) {
                    continue;
                }
                units.push((i, self.plan_step(i).await?));
            }
            let cap = self.invoker.config().dataflow_concurrency.max(1);
            // an empty fan-out still completes its step
            let lists: HashMap<usize, bool> = units
                .iter()
                .map(|(i, _)| (*i, self.df.steps[*i].foreach.is_some()))
                .collect();
            let flat: Vec<(usize, usize, Unit)> = units
                .into_iter()
                .flat_map(|(i, us)| us.into_iter().enumerate().map(move |(j, u)| (i, j, u)))
                .collect();
            let outcomes: Vec<(usize, usize, ObjectId, Result<InvocationResult, InvokeError>)> =
                stream::iter(flat.into_iter().map(|(i, j, u)| {
                    let inv = self.invoker.clone();
                    async move {
                        let res = match inv.crash_point(&u.env) {
                            Ok(()) => inv.dispatch(u.env).await,
                            Err(e) => Err(e),
                        };
                        (i, j, u.names, res)
                    }
                }))
                .buffer_unordered(cap)
                .collect()
                .await;

            let mut per_step: BTreeMap<usize, Vec<(usize, ObjectId)>> = BTreeMap::new();
            let mut first_err: Option<(usize, InvokeError)> = None;
            for &i in lists.keys() {
                per_step.entry(i).or_default();
            }
            for (i, j, names, res) in outcomes {
                match res {
                    Ok(_) => per_step.entry(i).or_default().push((j, names)),
                    Err(e) => {
                        if first_err.as_ref().is_none_or(|(k, _)| i < *k) {
                            first_err = Some((i, e));
                        }
                    }
                }
            }
            for (i, mut done) in per_step {
                if first_err.as_ref().is_some_and(|(k, _)| *k == i) {
                    continue;
                }
                done.sort_by_key(|(j, _)| *j);
                let var = self.df.steps[i].output_var.clone();
                self.state.steps.insert(
                    var,
                    StepProgress {
                        state: StepState::Done,
                        objects: done.into_iter().map(|(_, o)| o).collect(),
                        list: lists[&i],
                        error: None,
                    },
                );
            }
            if let Some((i, e)) = first_err {
                let var = self.df.steps[i].output_var.clone();
                if e.is_infra() {
                    // progress up to the previous layer is already saved
                    return Err(e);
                }
                self.state.steps.insert(
                    var.clone(),
                    StepProgress {
                        state: StepState::Failed,
                        objects: Vec::new(),
                        list: false,
                        error: Some(e.to_string()),
                    },
                );
                let mut failed = InvocationResult::failed(self.env.invocation_id.clone(), format!("step {var}: {e}"));
                failed.steps = Some(self.step_states());
                self.state.result = Some(failed);
                self.save().await?;
                return Err(InvokeError::StepFailed {
                    step: var,
                    cause: e.to_string(),
                });
            }
            self.save().await?;
        }

        let export = self
            .state
            .steps
            .get(&self.df.export_var)
            .cloned()
            .ok_or_else(|| InvokeError::Invalid(format!("export variable {} has no value", self.df.export_var)))?;
        let mut result = InvocationResult::done(self.env.invocation_id.clone());
        if !export.list {
            result.output_object_id = export.objects.first().cloned();
        }
        result.return_doc = Some(json!({
            "export": self.df.export_var,
            "objects": export.objects,
        }));
        result.steps = Some(self.step_states());
        self.state.result = Some(result.clone());
        self.save().await?;
        Ok(result)
    }

    fn step_states(&self) -> BTreeMap<String, StepState> {
        self.df
            .steps
            .iter()
            .map(|s| {
                let st = self.state.steps.get(&s.output_var).map_or(StepState::Pending, |p| p.state);
                (s.output_var.clone(), st)
            })
            .collect()
    }

    async fn save(&mut self) -> Result<(), InvokeError> {
        let id = run_object_id(&self.env.invocation_id);
        let mut rec = ObjectRecord::fresh(id.clone(), RUN_CLASS);
        rec.doc = serde_json::to_value(&self.state).expect("run state serializes");
        rec.revision = self.state_revision + 1;
        let c = self.invoker.grid().commit_routed_with(&id, self.state_revision, rec, true).await?;
        self.state_revision = c.new_revision;
        Ok(())
    }

    fn var(&self, name: &str) -> Result<&StepProgress, InvokeError> {
        self.state
            .steps
            .get(name)
            .ok_or_else(|| InvokeError::Invalid(format!("${name} has no value")))
    }

    fn single(&self, name: &str) -> Result<ObjectId, InvokeError> {
        let p = self.var(name)?;
        match (p.list, p.objects.first()) {
            (false, Some(o)) => Ok(o.clone()),
            _ => Err(InvokeError::Invalid(format!("${name} is not a single object"))),
        }
    }

    async fn field(&self, var: &str, field: &str) -> Result<Value, InvokeError> {
        let id = self.single(var)?;
        let rec = self.invoker.grid().get(&id).await?;
        Ok(rec.doc.get(field).cloned().unwrap_or(Value::Null))
    }

    /// Builds the invocations of step `i`.
    async fn plan_step(&self, i: usize) -> Result<Vec<Unit>, InvokeError> {
        let step = &self.df.steps[i];
        // fan-out items: objects for a list variable, values for a field
        let items: Option<Vec<Item>> = match step.foreach.as_deref().map(Ref::parse) {
            None => None,
            Some(Ref::Var(v)) => Some(self.var(&v)?.objects.iter().cloned().map(Item::Object).collect()),
            Some(Ref::Field(v, f)) => match self.field(&v, &f).await? {
                Value::Array(a) => Some(a.into_iter().map(Item::Value).collect()),
                other => {
                    return Err(InvokeError::Invalid(format!(
                        "foreach ${v}.{f} is not an array but {other}"
                    )))
                }
            },
            Some(other) => return Err(InvokeError::Invalid(format!("bad foreach source {other:?}"))),
        };
        if items.as_ref().is_some_and(|it| it.len() > MAX_FANOUT) {
            return Err(InvokeError::Invalid(format!(
                "step {} fans out over {} items; the limit is {MAX_FANOUT}",
                step.output_var,
                items.as_ref().map_or(0, Vec::len)
            )));
        }
        let mut units = Vec::new();
        match items {
            None => units.push(self.unit(i, None, None).await?),
            Some(items) => {
                for (j, item) in items.iter().enumerate() {
                    units.push(self.unit(i, Some(j), Some(item)).await?);
                }
            }
        }
        Ok(units)
    }

    async fn unit(&self, i: usize, j: Option<usize>, item: Option<&Item>) -> Result<Unit, InvokeError> {
        let step = &self.df.steps[i];
        let run = &self.env.invocation_id;
        let target = match Ref::parse(&step.target) {
            Ref::SelfObject => self.env.target_object_id.clone(),
            Ref::Var(v) => self.single(&v)?,
            Ref::Item => match item {
                Some(Item::Object(o)) => o.clone(),
                _ => return Err(InvokeError::Invalid("$item is not an object".into())),
            },
            other => return Err(InvokeError::Invalid(format!("bad target {other:?}"))),
        };
        let mut args = BTreeMap::new();
        let mut inputs: Vec<ObjectId> = Vec::new();
        for (param, value) in &step.arg_mapping {
            let v = match Ref::parse(value) {
                Ref::Literal(s) => s,
                Ref::SelfObject => self.env.target_object_id.to_string(),
                Ref::Arg(a) => self.env.args.get(&a).cloned().unwrap_or_default(),
                Ref::Var(v) => {
                    let p = self.var(&v)?;
                    inputs.extend(p.objects.iter().cloned());
                    if p.list {
                        serde_json::to_string(&p.objects).expect("ids serialize")
                    } else {
                        p.objects.first().map(ToString::to_string).unwrap_or_default()
                    }
                }
                Ref::Field(v, f) => value_string(self.field(&v, &f).await?),
                Ref::Item => match item {
                    Some(Item::Object(o)) => o.to_string(),
                    Some(Item::Value(v)) => value_string(v.clone()),
                    None => return Err(InvokeError::Invalid(format!("argument {param} uses $item outside foreach"))),
                },
            };
            args.insert(param.clone(), v);
        }
        inputs.dedup();

        // the step's binding decides whether it names an output or its target
        let target_class = match self.invoker.grid().get(&target).await {
            Ok(r) => r.class_ref,
            Err(GridError::NotFound(_)) => return Err(InvokeError::NotFound(format!("step target {target}"))),
            Err(e) => return Err(e.into()),
        };
        let creates_output = self
            .invoker
            .deps()
            .registry
            .resolve_class(&target_class)?
            .binding(&step.function)
            .is_some_and(|b| b.output_class.is_some());
        let out = step_output_id(run, i, j);
        let names = if creates_output { out.clone() } else { target.clone() };
        let env = InvocationEnvelope {
            invocation_id: step_invocation_id(run, i, j),
            target_object_id: target,
            binding_name: step.function.clone(),
            args,
            input_refs: inputs,
            mode: Mode::Sync,
            partition_id: None,
            offset: None,
            class_ref: None,
            output_object_id: Some(out),
            immutable: self.df.immutable,
            caller: CallerContext::dataflow_of(&self.class.name),
        };
        Ok(Unit { env, names })
    }
}

enum Item {
    Object(ObjectId),
    Value(Value),
}

fn value_string(v: Value) -> String {
    match v {
        Value::String(s) => s,
        Value::Null => String::new(),
        other => other.to_string(),
    }
}
