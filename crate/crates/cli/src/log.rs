//! Line-delimited JSON on stderr, for both our own events and the library's `log` records.

use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn emit(mut line: Value) {
    line["ts"] = json!(now());
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

/// A structured event; `fields` must be a JSON object.
pub fn event(name: &str, fields: Value) {
    let mut v = match fields {
        Value::Object(_) => fields,
        other => json!({ "value": other }),
    };
    v["event"] = json!(name);
    v["level"] = json!("info");
    if log::log_enabled!(log::Level::Info) {
        emit(v);
    }
}

struct JsonLogger;

impl log::Log for JsonLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::max_level()
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            emit(json!({
                "level": r.level().as_str().to_ascii_lowercase(),
                "target": r.target(),
                "msg": r.args().to_string(),
            }));
        }
    }

    fn flush(&self) {}
}

static LOGGER: JsonLogger = JsonLogger;

pub fn init(level: log::LevelFilter) {
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(level);
    }
}
