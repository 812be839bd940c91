use std::fmt;
use std::process::ExitCode;

use clap::ValueEnum;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Text,
    Json,
}

/// Stable process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Denied = 1,
    Usage = 2,
    Runtime = 3,
}

impl From<Exit> for ExitCode {
    fn from(e: Exit) -> Self {
        ExitCode::from(e as u8)
    }
}

/// A failed command: exit status, machine-readable code and message.
#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub code: String,
    pub message: String,
    /// The command already wrote its result; nothing more is printed.
    pub reported: bool,
}

impl CliError {
    pub fn new(exit: Exit, code: impl Into<String>, message: impl fmt::Display) -> Self {
        CliError {
            exit,
            code: code.into(),
            message: message.to_string(),
            reported: false,
        }
    }

    pub fn already_reported(mut self) -> Self {
        self.reported = true;
        self
    }

    pub fn usage(code: impl Into<String>, message: impl fmt::Display) -> Self {
        Self::new(Exit::Usage, code, message)
    }

    pub fn runtime(code: impl Into<String>, message: impl fmt::Display) -> Self {
        Self::new(Exit::Runtime, code, message)
    }

    pub fn denied(code: impl Into<String>, message: impl fmt::Display) -> Self {
        Self::new(Exit::Denied, code, message)
    }
}

/// Writes command results to stdout in the selected format.
#[derive(Debug, Clone, Copy)]
pub struct Out {
    pub format: Format,
}

impl Out {
    /// Prints `value` as one JSON document, or `text` in text mode.
    pub fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        match self.format {
            Format::Json => println!(
                "{}",
                serde_json::to_string(value).expect("output serializes")
            ),
            Format::Text => {
                let t = text();
                if t.ends_with('\n') {
                    print!("{t}");
                } else {
                    println!("{t}");
                }
            }
        }
    }

    /// Reports an error. JSON mode writes the error document to stdout so
    /// the output is still one JSON document.
    pub fn error(&self, e: &CliError) {
        if e.reported {
            return;
        }
        match self.format {
            Format::Json => println!("{}", error_json(e)),
            Format::Text => eprintln!("error: {} ({})", e.message, e.code),
        }
    }
}

pub fn error_json(e: &CliError) -> Value {
    json!({"error": e.code, "message": e.message})
}
