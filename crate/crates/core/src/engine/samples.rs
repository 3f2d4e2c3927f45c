//! Sample task functions for the inline engine.
//!
//! | name              | effect                                                          |
//! |-------------------|-----------------------------------------------------------------|
//! | `echo`            | `newDoc` = args                                                 |
//! | `json-update`     | `newDoc` = doc overlaid with args                               |
//! | `increment`       | `doc.counter += args.by` (default 1)                            |
//! | `text-concat`     | state key `file` becomes old content + `args.text`              |
//! | `fail`            | reports failure                                                 |
//! | `transcode`       | output object: doc + args, `mp4` = `"{resolution}:"` + input    |
//! | `video-split`     | output object listing `args.n` segment names                    |
//! | `video-detect`    | output object with a face count for `args.segment`              |
//! | `video-recognize` | output object summarising the detect outputs in `inputObjects`  |

use std::sync::Arc;

use serde_json::{json, Map, Value};

use super::inline::{InlineCtx, InlineEngine};
use crate::protocol::{OutputObject, Task, TaskCompletion};
use crate::ring::hash64;

pub fn register_samples(engine: &InlineEngine) {
    engine.register_fn("echo", |t, _| TaskCompletion::ok(t.invocation_id.clone()).with_doc(args_doc(t)));
    engine.register_fn("json-update", |t, _| {
        let mut doc = t.main_object.doc.as_object().cloned().unwrap_or_default();
        for (k, v) in &t.args {
            doc.insert(k.clone(), Value::String(v.clone()));
        }
        TaskCompletion::ok(t.invocation_id.clone()).with_doc(Value::Object(doc))
    });
    engine.register_fn("increment", |t, _| {
        let by: i64 = match t.args.get("by").map(|s| s.parse()) {
            None => 1,
            Some(Ok(n)) => n,
            Some(Err(_)) => return TaskCompletion::failed(t.invocation_id.clone(), "args.by is not an integer"),
        };
        let mut doc = t.main_object.doc.as_object().cloned().unwrap_or_default();
        let n = doc.get("counter").and_then(Value::as_i64).unwrap_or(0) + by;
        doc.insert("counter".into(), json!(n));
        let mut c = TaskCompletion::ok(t.invocation_id.clone()).with_doc(Value::Object(doc));
        c.return_doc = Some(json!({ "counter": n }));
        c
    });
    engine.register_fn("fail", |t, _| TaskCompletion::failed(t.invocation_id.clone(), "requested failure"));
    engine.register("text-concat", Arc::new(|t: Task, ctx: InlineCtx| Box::pin(async move { text_concat(t, ctx).await })));
    engine.register("transcode", Arc::new(|t: Task, ctx: InlineCtx| Box::pin(async move { transcode(t, ctx).await })));
    engine.register_fn("video-split", |t, _| {
        let n: usize = t.args.get("n").and_then(|s| s.parse().ok()).unwrap_or(4);
        let segments: Vec<Value> = (0..n)
            .map(|i| Value::String(format!("{}-seg-{i}", t.main_object.id)))
            .collect();
        output(t, json!({ "source": t.main_object.id, "segments": segments }))
    });
    engine.register_fn("video-detect", |t, _| {
        let seg = t.args.get("segment").cloned().unwrap_or_default();
        output(t, json!({ "segment": seg, "faces": face_count(&seg) }))
    });
    engine.register_fn("video-recognize", |t, _| {
        let mut per: Vec<(String, u64)> = t
            .input_objects
            .iter()
            .filter_map(|o| {
                Some((
                    o.doc.get("segment")?.as_str()?.to_string(),
                    o.doc.get("faces")?.as_u64()?,
                ))
            })
            .collect();
        per.sort();
        let total: u64 = per.iter().map(|(_, f)| f).sum();
        output(
            t,
            json!({
                "segments": per.len(),
                "totalFaces": total,
                "perSegment": per.iter().map(|(s, f)| json!([s, f])).collect::<Vec<_>>(),
            }),
        )
    });
}

/// Face count the `video-detect` stub reports for a segment name.
pub fn face_count(segment: &str) -> u64 {
    hash64(segment.as_bytes()) % 4
}

fn args_doc(t: &Task) -> Value {
    Value::Object(
        t.args
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect::<Map<_, _>>(),
    )
}

fn output(t: &Task, doc: Value) -> TaskCompletion {
    if t.output_template.is_none() {
        return TaskCompletion::failed(t.invocation_id.clone(), "no output template");
    }
    let mut c = TaskCompletion::ok(t.invocation_id.clone());
    c.output_object = Some(OutputObject {
        doc,
        committed_keys: Default::default(),
    });
    c
}

async fn text_concat(t: Task, ctx: InlineCtx) -> TaskCompletion {
    let inv = t.invocation_id.clone();
    let Some(alloc) = t.write_allocations.get("file") else {
        return TaskCompletion::failed(inv, "no write allocation for file");
    };
    let old = match ctx.read_file(&t, &t.main_object.id, "file").await {
        Ok(b) => b.unwrap_or_default(),
        Err(e) => return TaskCompletion::failed(inv, e),
    };
    let mut bytes = old;
    bytes.extend_from_slice(t.args.get("text").map(String::as_bytes).unwrap_or_default());
    if let Err(e) = ctx.write_file(&alloc.url, bytes).await {
        return TaskCompletion::failed(inv, e);
    }
    let mut c = TaskCompletion::ok(inv);
    c.committed_keys.insert("file".into(), alloc.version_id.clone());
    c
}

async fn transcode(t: Task, ctx: InlineCtx) -> TaskCompletion {
    let inv = t.invocation_id.clone();
    let Some(tpl) = &t.output_template else {
        return TaskCompletion::failed(inv, "no output template");
    };
    let mut doc = t.main_object.doc.as_object().cloned().unwrap_or_default();
    for (k, v) in &t.args {
        doc.insert(k.clone(), Value::String(v.clone()));
    }
    let mut out = OutputObject {
        doc: Value::Object(doc),
        committed_keys: Default::default(),
    };
    if let Some(alloc) = tpl.write_allocations.get("mp4") {
        let input = match ctx.read_file(&t, &t.main_object.id, "mp4").await {
            Ok(b) => b.unwrap_or_default(),
            Err(e) => return TaskCompletion::failed(inv, e),
        };
        let res = t.args.get("resolution").cloned().unwrap_or_default();
        let mut bytes = format!("{res}:").into_bytes();
        bytes.extend_from_slice(&input);
        if let Err(e) = ctx.write_file(&alloc.url, bytes).await {
            return TaskCompletion::failed(inv, e);
        }
        out.committed_keys.insert("mp4".into(), alloc.version_id.clone());
    }
    let mut c = TaskCompletion::ok(inv);
    c.output_object = Some(out);
    c
}
