use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Mod => "%",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
        }
    }
}

/// Host primitives reachable with the `@name(...)` syntax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prim {
    Print,
    StrLen,
    Substr,
    IndexOf,
    ByteAt,
    FromByte,
    ToStr,
    ParseNumber,
    JsonGet,
    Sqrt,
    Floor,
    ClassName,
    /// Opens a file in the process that runs the code.
    FileOpen,
    /// Opens a file at the origin process of a debugging session. Only
    /// produced by instrumentation, never by the compiler.
    RemoteFileOpen,
    FileRead,
    FileReadAll,
    FileAtEnd,
    FileClose,
    ArrayNew,
    ArrayAt,
    ArrayAtPut,
    ArraySize,
}

impl Prim {
    pub const ALL: [Prim; 21] = [
        Prim::Print,
        Prim::StrLen,
        Prim::Substr,
        Prim::IndexOf,
        Prim::ByteAt,
        Prim::FromByte,
        Prim::ToStr,
        Prim::ParseNumber,
        Prim::JsonGet,
        Prim::Sqrt,
        Prim::Floor,
        Prim::ClassName,
        Prim::FileOpen,
        Prim::FileRead,
        Prim::FileReadAll,
        Prim::FileAtEnd,
        Prim::FileClose,
        Prim::ArrayNew,
        Prim::ArrayAt,
        Prim::ArrayAtPut,
        Prim::ArraySize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Prim::Print => "print",
            Prim::StrLen => "strLen",
            Prim::Substr => "substr",
            Prim::IndexOf => "indexOf",
            Prim::ByteAt => "byteAt",
            Prim::FromByte => "fromByte",
            Prim::ToStr => "toStr",
            Prim::ParseNumber => "parseNumber",
            Prim::JsonGet => "jsonGet",
            Prim::Sqrt => "sqrt",
            Prim::Floor => "floor",
            Prim::ClassName => "className",
            Prim::FileOpen => "fileOpen",
            Prim::RemoteFileOpen => "remoteFileOpen",
            Prim::FileRead => "fileRead",
            Prim::FileReadAll => "fileReadAll",
            Prim::FileAtEnd => "fileAtEnd",
            Prim::FileClose => "fileClose",
            Prim::ArrayNew => "arrayNew",
            Prim::ArrayAt => "arrayAt",
            Prim::ArrayAtPut => "arrayAtPut",
            Prim::ArraySize => "arraySize",
        }
    }

    pub fn from_name(name: &str) -> Option<Prim> {
        Prim::ALL.iter().copied().find(|p| p.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            Prim::Print
            | Prim::StrLen
            | Prim::FromByte
            | Prim::ToStr
            | Prim::ParseNumber
            | Prim::Sqrt
            | Prim::Floor
            | Prim::ClassName
            | Prim::FileOpen
            | Prim::RemoteFileOpen
            | Prim::FileReadAll
            | Prim::FileAtEnd
            | Prim::FileClose
            | Prim::ArrayNew
            | Prim::ArraySize => 1,
            Prim::ByteAt | Prim::JsonGet | Prim::FileRead | Prim::ArrayAt => 2,
            Prim::Substr | Prim::IndexOf | Prim::ArrayAtPut => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    PushNil,
    PushTrue,
    PushFalse,
    PushSelf,
    PushInt(i64),
    PushFloat(f64),
    PushStr(Arc<str>),
    LoadLocal(u16),
    StoreLocal(u16),
    LoadOuter { depth: u8, slot: u16 },
    StoreOuter { depth: u8, slot: u16 },
    LoadIvar(Arc<str>),
    StoreIvar(Arc<str>),
    LoadClassVar { class: Arc<str>, name: Arc<str> },
    StoreClassVar { class: Arc<str>, name: Arc<str> },
    Binary(BinOp),
    Not,
    Neg,
    Send { selector: Arc<str>, argc: u8 },
    New { class: Arc<str> },
    Prim { prim: Prim, argc: u8 },
    MakeBlock(u16),
    Jump(u32),
    JumpIfFalse(u32),
    /// Branches when the top of stack is false, leaving it in place;
    /// otherwise pops it. Used by `&&`.
    JumpIfFalseKeep(u32),
    /// `||` counterpart of [`Instr::JumpIfFalseKeep`].
    JumpIfTrueKeep(u32),
    Pop,
    Dup,
    Return,
    Halt,
    Raise { class: Arc<str> },
}

impl Instr {
    pub fn branch_target(&self) -> Option<u32> {
        match self {
            Instr::Jump(t) | Instr::JumpIfFalse(t) | Instr::JumpIfFalseKeep(t) | Instr::JumpIfTrueKeep(t) => {
                Some(*t)
            }
            _ => None,
        }
    }
}

/// Compiled body of a method, a block, or an evaluated expression.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeUnit {
    /// Parameters come first in `local_names`.
    pub param_count: usize,
    pub local_names: Vec<String>,
    pub instrs: Vec<Instr>,
    /// Source line for each instruction.
    pub lines: Vec<u32>,
    pub blocks: Vec<Arc<CodeUnit>>,
}

impl CodeUnit {
    pub fn temp_count(&self) -> usize {
        self.local_names.len() - self.param_count
    }

    pub fn line_of(&self, pc: usize) -> u32 {
        self.lines.get(pc).or(self.lines.last()).copied().unwrap_or(0)
    }

    /// Follows a path of nested block indices from this unit.
    pub fn block_at(self: &Arc<Self>, path: &[u16]) -> Option<Arc<CodeUnit>> {
        let mut unit = Arc::clone(self);
        for &idx in path {
            unit = Arc::clone(unit.blocks.get(idx as usize)?);
        }
        Some(unit)
    }

    /// Checks that every branch lands inside the code and that the code is
    /// non-empty. Applies recursively to nested blocks.
    pub fn validate(&self) -> Result<(), String> {
        if self.instrs.is_empty() {
            return Err("empty code unit".into());
        }
        if self.lines.len() != self.instrs.len() {
            return Err("line table length mismatch".into());
        }
        for (pc, ins) in self.instrs.iter().enumerate() {
            if let Some(t) = ins.branch_target() {
                if t as usize >= self.instrs.len() {
                    return Err(format!("branch at {pc} targets {t}, out of range"));
                }
            }
            if let Instr::MakeBlock(b) = ins {
                if *b as usize >= self.blocks.len() {
                    return Err(format!("block index {b} out of range"));
                }
            }
            if let Instr::LoadLocal(s) | Instr::StoreLocal(s) = ins {
                if *s as usize >= self.local_names.len() {
                    return Err(format!("local slot {s} out of range"));
                }
            }
        }
        self.blocks.iter().try_for_each(|b| b.validate())
    }

    /// Rewrites every instruction in this unit and its blocks.
    pub fn rewrite(&self, f: &dyn Fn(&Instr) -> Option<Instr>) -> CodeUnit {
        CodeUnit {
            param_count: self.param_count,
            local_names: self.local_names.clone(),
            instrs: self.instrs.iter().map(|i| f(i).unwrap_or_else(|| i.clone())).collect(),
            lines: self.lines.clone(),
            blocks: self.blocks.iter().map(|b| Arc::new(b.rewrite(f))).collect(),
        }
    }
}
