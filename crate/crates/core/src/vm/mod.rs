//! The guest language: parser, compiler, image, interpreter and execution
//! states.

pub mod bytecode;
pub mod compiler;
pub mod error;
pub mod host;
pub mod image;
pub mod interp;
pub mod lexer;
pub mod parser;
pub mod patch;
pub mod state;
pub mod value;

pub use error::{EvalError, LoadError, ParseError, PatchError, SpawnError, StepError};
pub use host::{LocalFiles, NoFiles, ResourceHost};
pub use image::{CodeHash, ProgramImage};
pub use interp::{spawn, EvalOutcome, StepOp, Vm};
pub use patch::{ChangeRecord, Patch};
pub use state::{ExecutionState, Frame, GuestException, HeapObject, MethodRef, Status, TaskArgs};
pub use value::{Oid, Value};
