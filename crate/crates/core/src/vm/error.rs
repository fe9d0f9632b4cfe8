use thiserror::Error;

use super::state::GuestException;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{col}: {message}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoadError {
    #[error("parse error at {0}")]
    Parse(#[from] ParseError),
    #[error("duplicate class {0}")]
    DuplicateClass(String),
    #[error("duplicate selector {selector} in class {class}")]
    DuplicateSelector { class: String, selector: String },
    #[error("duplicate variable {name} in class {class}")]
    DuplicateVariable { class: String, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpawnError {
    #[error("unknown class {0}")]
    UnknownClass(String),
    #[error("class {class} does not understand {selector}")]
    UnknownSelector { class: String, selector: String },
    #[error("{selector} expects {expected} arguments, got {got}")]
    WrongArity { selector: String, expected: usize, got: usize },
    #[error("argument graph is inconsistent: {0}")]
    BadArgs(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StepError {
    #[error("cannot step a {0} execution")]
    StepAtCompletedState(&'static str),
    #[error("execution is not suspended")]
    NotSuspended,
    #[error("frame index {index} out of range (depth {depth})")]
    InvalidFrameIndex { index: usize, depth: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("parse error at {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error("guest exception {}: {}", .0.class_name, .0.message)]
    Guest(GuestException),
    #[error("evaluation reached a halt")]
    Halted,
    #[error("evaluation exceeded its instruction budget")]
    FuelExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatchError {
    #[error("unknown class {0}")]
    UnknownClass(String),
    #[error("conflicting change: {0}")]
    ConflictingChange(String),
    #[error("change does not compile: {0}")]
    Compile(#[from] LoadError),
}
