//! Exit-code classification and the machine-readable error document.

use std::fmt;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Config,
    Data,
    Runtime,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Runtime => 4,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn kind_of_core(e: &fakemap::Error) -> Kind {
    use fakemap::Error as E;
    match e {
        E::InvalidArgument { .. } | E::Json(_) => Kind::Config,
        E::Data(_) | E::Io(_) | E::Image(_) => Kind::Data,
        E::Domain { .. } | E::Shape { .. } | E::Runtime(_) => Kind::Runtime,
    }
}

/// The first classifiable cause in the chain decides the kind.
pub fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<fakemap::Error>() {
            return kind_of_core(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Kind::Data;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return Kind::Config;
        }
    }
    Kind::Runtime
}

#[derive(Serialize)]
struct ErrorDoc<'a> {
    error: Kind,
    exit_code: u8,
    message: String,
    causes: Vec<String>,
    command: &'a str,
}

pub fn error_json(err: &anyhow::Error, command: &str) -> (u8, String) {
    let kind = classify(err);
    let doc = ErrorDoc {
        error: kind,
        exit_code: kind.exit_code(),
        message: err.to_string(),
        causes: err.chain().skip(1).map(|c| c.to_string()).collect(),
        command,
    };
    (kind.exit_code(), serde_json::to_string(&doc).unwrap_or_else(|_| format!("{{\"message\":{:?}}}", err.to_string())))
}
