use std::fmt;
use std::path::Path;

use serde::Serialize;

/// Failure reported as `{"error": code, "message": text, "stage": name}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("config", message)
    }

    pub fn format(message: impl Into<String>) -> Self {
        Self::new("format", message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        let code = if e.kind() == std::io::ErrorKind::NotFound {
            "missing_file"
        } else {
            "io"
        };
        Self::new(code, format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self, stage: &str) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            error: &'a str,
            message: &'a str,
            stage: &'a str,
        }
        serde_json::to_string(&Report {
            error: self.code,
            message: &self.message,
            stage,
        })
        .expect("error serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

fn io_source<'a>(e: &'a (dyn std::error::Error + 'static)) -> Option<&'a std::io::Error> {
    let mut cur = Some(e);
    while let Some(err) = cur {
        if let Some(io) = err.downcast_ref::<std::io::Error>() {
            return Some(io);
        }
        cur = err.source();
    }
    None
}

/// Maps a library error to a code: missing files and i/o first, then the
/// given fallback.
pub fn classify(e: &(dyn std::error::Error + 'static), fallback: &'static str) -> CliError {
    let code = match io_source(e) {
        Some(io) if io.kind() == std::io::ErrorKind::NotFound => "missing_file",
        Some(_) => "io",
        None => fallback,
    };
    CliError::new(code, e.to_string())
}

macro_rules! lift {
    ($($ty:ty => $code:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                classify(&e, $code)
            }
        })*
    };
}

lift! {
    towscan::depth::DepthError => "format",
    towscan::tows::GeometryError => "geometry",
    towscan::sampler::SampleError => "format",
    towscan::nnet::NnError => "model",
    towscan::anomaly::AnomalyError => "evaluation",
    towscan::localize::LocalizeError => "format",
    towscan::synth::SynthError => "config",
    serde_json::Error => "format",
}
