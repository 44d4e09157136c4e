use std::fmt;
use std::path::Path;

use voicekit::audio::AudioError;
use voicekit::augment::AugmentError;
use voicekit::corpus::CorpusError;
use voicekit::eval::EvalError;
use voicekit::experts::ExpertError;
use voicekit::features::FeatureError;
use voicekit::moe::MoeError;
use voicekit::synthgen::SynthError;

/// Command failure carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn user(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Failure::user(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure { code: if e.is_internal() { 2 } else { 1 }, message: e.to_string() }
    }
}

macro_rules! user_errors {
    ($($t:ty),*) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::user(e.to_string())
            }
        })*
    };
}

user_errors!(AudioError, AugmentError, CorpusError, ExpertError, FeatureError, MoeError, SynthError, serde_json::Error);

pub type CmdResult<T = ()> = Result<T, Failure>;
