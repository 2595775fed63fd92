//! Consolidated run report: one entry per stage, pass/fail per check.

use serde::Serialize;
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::fmt::Write;

/// Stages in pipeline order; absent ones are marked skipped.
pub const STAGES: [&str; 7] = ["data", "training", "bounds", "certification", "synthesis", "simulation", "verification"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub command: String,
    stages: BTreeMap<String, Value>,
    checks: BTreeMap<String, Check>,
    values: BTreeMap<String, Value>,
    error: Option<Value>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Self { command: command.into(), ..Self::default() }
    }

    pub fn stage(&mut self, name: &str, body: Value) {
        debug_assert!(STAGES.contains(&name), "unknown stage {name}");
        self.stages.insert(name.into(), body);
    }

    pub fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.insert(name.into(), Check { pass, detail: detail.into() });
    }

    /// A reported quantity with its sources, e.g. `{"printed": .., "computed": ..}`.
    pub fn value(&mut self, name: &str, tagged: Value) {
        self.values.insert(name.into(), tagged);
    }

    pub fn fail(&mut self, stage: &str, code: u8, message: &str) {
        self.error = Some(json!({ "stage": stage, "code": code, "message": message }));
    }

    pub fn has_content(&self) -> bool {
        !self.stages.is_empty() || self.error.is_some()
    }

    pub fn pass(&self) -> bool {
        self.error.is_none() && self.checks.values().all(|c| c.pass)
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|(_, c)| !c.pass).map(|(k, _)| k.as_str()).collect()
    }

    pub fn to_json(&self) -> Value {
        let mut stages = Map::new();
        for s in STAGES {
            stages.insert(s.into(), self.stages.get(s).cloned().unwrap_or_else(|| json!({ "status": "skipped" })));
        }
        let mut root = Map::new();
        root.insert("command".into(), json!(self.command));
        root.insert("stages".into(), Value::Object(stages));
        root.insert("checks".into(), serde_json::to_value(&self.checks).expect("checks serialize"));
        if !self.values.is_empty() {
            root.insert("values".into(), serde_json::to_value(&self.values).expect("values serialize"));
        }
        if let Some(e) = &self.error {
            root.insert("error".into(), e.clone());
        }
        root.insert("pass".into(), json!(self.pass()));
        Value::Object(root)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "nodecert {}", self.command).unwrap();
        writeln!(out).unwrap();
        for s in STAGES {
            match self.stages.get(s) {
                None => writeln!(out, "{s:<14} skipped").unwrap(),
                Some(body) => {
                    writeln!(out, "{s:<14} {}", summary(body)).unwrap();
                }
            }
        }
        if !self.values.is_empty() {
            writeln!(out, "\nvalues").unwrap();
            for (k, v) in &self.values {
                writeln!(out, "  {k:<28} {}", compact(v)).unwrap();
            }
        }
        if !self.checks.is_empty() {
            writeln!(out, "\nchecks").unwrap();
            for (k, c) in &self.checks {
                writeln!(out, "  [{}] {k}: {}", if c.pass { "PASS" } else { "FAIL" }, c.detail).unwrap();
            }
        }
        if let Some(e) = &self.error {
            writeln!(out, "\nerror in {}: {}", e["stage"].as_str().unwrap_or("?"), e["message"].as_str().unwrap_or("")).unwrap();
        }
        writeln!(out, "\noverall: {}", if self.pass() { "PASS" } else { "FAIL" }).unwrap();
        out
    }
}

/// Scalar fields of a stage on one line.
fn summary(body: &Value) -> String {
    let Some(obj) = body.as_object() else {
        return compact(body);
    };
    obj.iter()
        .filter(|(_, v)| v.is_number() || v.is_string() || v.is_boolean())
        .map(|(k, v)| format!("{k}={}", compact(v)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn compact(v: &Value) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) if !n.is_i64() && !n.is_u64() => format!("{f:.6e}"),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_stages_are_marked_skipped() {
        let r = Report::new("certify");
        let v = r.to_json();
        for s in STAGES {
            assert_eq!(v["stages"][s]["status"], "skipped");
        }
        assert_eq!(v["pass"], true);
        assert!(r.to_text().contains("synthesis      skipped"));
    }

    #[test]
    fn keys_are_sorted_and_output_is_stable() {
        let mut r = Report::new("run");
        r.stage("training", json!({ "zeta": 1, "alpha": 2.5 }));
        r.check("b", true, "ok");
        r.check("a", false, "bad");
        let text = serde_json::to_string(&r.to_json()).unwrap();
        assert!(text.find("\"alpha\"").unwrap() < text.find("\"zeta\"").unwrap());
        assert!(text.find("\"a\"").unwrap() < text.find("\"b\"").unwrap());
        assert_eq!(text, serde_json::to_string(&r.to_json()).unwrap());
        assert_eq!(r.failed_checks(), vec!["a"]);
        assert!(!r.pass());
    }

    #[test]
    fn error_fails_the_report() {
        let mut r = Report::new("train");
        r.fail("training", 4, "diverged");
        assert!(!r.pass());
        assert_eq!(r.to_json()["error"]["code"], 4);
    }
}
