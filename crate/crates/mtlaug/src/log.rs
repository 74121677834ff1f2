//! Line-delimited JSON logging to stderr.

use serde_json::{json, Value};
use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

pub fn event(level: &str, name: &str, fields: Value) {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let mut line = json!({ "ts_ms": ts as u64, "level": level, "event": name });
    if let (Some(o), Value::Object(f)) = (line.as_object_mut(), fields) {
        o.extend(f);
    }
    let _ = writeln!(std::io::stderr().lock(), "{}", line);
}

pub fn info(name: &str, fields: Value) {
    event("info", name, fields)
}

pub fn warn(name: &str, fields: Value) {
    event("warn", name, fields)
}
