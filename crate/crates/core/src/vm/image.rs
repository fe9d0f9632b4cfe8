use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::bytecode::{CodeUnit, Instr, Prim};
use super::compiler::{compile_body, ClassScope};
use super::error::{LoadError, PatchError};
use super::parser::{parse_class, parse_method, parse_program, ClassAst, Literal, MethodAst};
use super::patch::{ChangeRecord, Patch};
use super::state::ExecutionState;
use super::value::Value;

/// Classes every image carries. Blocks and file streams are ordinary heap
/// objects of these classes.
pub const PRELUDE: &str = r#"class Block {
  var home, receiver, index;
}

class FileStream {
  var path, position;
  method next(n) { return @fileRead(self, n); }
  method upToEnd() { return @fileReadAll(self); }
  method atEnd() { return @fileAtEnd(self); }
  method close() { return @fileClose(self); }
}

class Array {
  method at(i) { return @arrayAt(self, i); }
  method atPut(i, v) { return @arrayAtPut(self, i, v); }
  method size() { return @arraySize(self); }
}
"#;

pub const BLOCK_CLASS: &str = "Block";
pub const FILE_STREAM_CLASS: &str = "FileStream";
/// Instances of `Array` have one field per element rather than named fields.
pub const ARRAY_CLASS: &str = "Array";

/// SHA-256 digest over the canonical form of all classes and methods.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeHash(pub [u8; 32]);

impl CodeHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<CodeHash> {
        let bytes = hex::decode(s).ok()?;
        Some(CodeHash(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for CodeHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CodeHash({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for CodeHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex()[..16])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodDef {
    pub selector: String,
    pub params: Vec<String>,
    pub source: String,
    pub line: u32,
    pub code: Arc<CodeUnit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDef {
    pub name: String,
    pub ivars: Vec<String>,
    pub class_vars: Vec<(String, Value)>,
    pub methods: BTreeMap<String, Arc<MethodDef>>,
    pub builtin: bool,
}

impl ClassDef {
    pub fn ivar_index(&self, name: &str) -> Option<usize> {
        self.ivars.iter().position(|n| n == name)
    }

    pub fn class_var(&self, name: &str) -> Option<&Value> {
        self.class_vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// The class rendered back as a declaration, as a code browser shows it.
    pub fn definition(&self) -> String {
        let mut out = format!("class {} {{\n", self.name);
        if !self.ivars.is_empty() {
            out.push_str(&format!("  var {};\n", self.ivars.join(", ")));
        }
        for (n, v) in &self.class_vars {
            let lit = match v {
                Value::Str(s) => format!("{:?}", &**s),
                other => other.to_string(),
            };
            out.push_str(&format!("  classvar {n} = {lit};\n"));
        }
        for m in self.methods.values() {
            for line in m.source.lines() {
                out.push_str("  ");
                out.push_str(line);
                out.push('\n');
            }
        }
        out.push('}');
        out
    }

    fn class_var_names(&self) -> Vec<String> {
        self.class_vars.iter().map(|(n, _)| n.clone()).collect()
    }

    fn compile_method(&self, ast: &MethodAst) -> Result<MethodDef, LoadError> {
        let cv = self.class_var_names();
        let scope = ClassScope { class: &self.name, ivars: &self.ivars, class_vars: &cv };
        let code = compile_body(&ast.params, &ast.body, &[], &scope, ast.line)?;
        debug_assert!(code.validate().is_ok());
        Ok(MethodDef {
            selector: ast.selector.clone(),
            params: ast.params.clone(),
            source: ast.source.clone(),
            line: ast.line,
            code: Arc::new(code),
        })
    }

    fn recompile_all(&mut self) -> Result<(), LoadError> {
        let sources: Vec<(String, Arc<MethodDef>)> =
            self.methods.iter().map(|(k, v)| (k.clone(), Arc::clone(v))).collect();
        for (sel, old) in sources {
            let ast = parse_method(&old.source)?;
            let mut m = self.compile_method(&ast)?;
            m.line = old.line;
            self.methods.insert(sel, Arc::new(m));
        }
        Ok(())
    }
}

/// A loaded program: the prelude plus user classes, with its code hash.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramImage {
    classes: BTreeMap<String, ClassDef>,
    hash: CodeHash,
    instrumented: bool,
}

fn literal_value(l: &Literal) -> Value {
    match l {
        Literal::Nil => Value::Nil,
        Literal::Bool(b) => Value::Bool(*b),
        Literal::Int(i) => Value::Int(*i),
        Literal::Float(f) => Value::Float(*f),
        Literal::Str(s) => Value::str(s),
    }
}

fn build_class(ast: &ClassAst, builtin: bool) -> Result<ClassDef, LoadError> {
    let mut class = ClassDef {
        name: ast.name.clone(),
        ivars: Vec::new(),
        class_vars: Vec::new(),
        methods: BTreeMap::new(),
        builtin,
    };
    for v in &ast.ivars {
        if class.ivars.contains(v) {
            return Err(LoadError::DuplicateVariable { class: ast.name.clone(), name: v.clone() });
        }
        class.ivars.push(v.clone());
    }
    for (n, lit) in &ast.class_vars {
        if class.class_var(n).is_some() || class.ivars.contains(n) {
            return Err(LoadError::DuplicateVariable { class: ast.name.clone(), name: n.clone() });
        }
        class.class_vars.push((n.clone(), literal_value(lit)));
    }
    for m in &ast.methods {
        if class.methods.contains_key(&m.selector) {
            return Err(LoadError::DuplicateSelector { class: ast.name.clone(), selector: m.selector.clone() });
        }
        let def = class.compile_method(m)?;
        class.methods.insert(m.selector.clone(), Arc::new(def));
    }
    Ok(class)
}

fn hash_field(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

fn hash_value(h: &mut Sha256, v: &Value) {
    match v {
        Value::Nil => h.update([0]),
        Value::Bool(b) => h.update([1, *b as u8]),
        Value::Int(i) => {
            h.update([2]);
            h.update(i.to_le_bytes());
        }
        Value::Float(f) => {
            h.update([3]);
            h.update(f.to_bits().to_le_bytes());
        }
        Value::Str(s) => {
            h.update([4]);
            hash_field(h, s.as_bytes());
        }
        Value::Ref(_) => h.update([5]),
    }
}

impl ProgramImage {
    /// Parses and compiles a program. The prelude classes are always present.
    pub fn load(source: &str) -> Result<ProgramImage, LoadError> {
        let mut classes = BTreeMap::new();
        for ast in parse_program(PRELUDE).expect("prelude parses") {
            let c = build_class(&ast, true).expect("prelude compiles");
            classes.insert(c.name.clone(), c);
        }
        for ast in parse_program(source)? {
            if classes.contains_key(&ast.name) {
                return Err(LoadError::DuplicateClass(ast.name.clone()));
            }
            let c = build_class(&ast, false)?;
            classes.insert(c.name.clone(), c);
        }
        let mut image = ProgramImage { classes, hash: CodeHash([0; 32]), instrumented: false };
        image.rehash();
        Ok(image)
    }

    pub fn hash(&self) -> CodeHash {
        self.hash
    }

    pub fn is_instrumented(&self) -> bool {
        self.instrumented
    }

    pub fn class(&self, name: &str) -> Option<&ClassDef> {
        self.classes.get(name)
    }

    pub fn classes(&self) -> impl Iterator<Item = &ClassDef> {
        self.classes.values()
    }

    pub fn user_classes(&self) -> impl Iterator<Item = &ClassDef> {
        self.classes.values().filter(|c| !c.builtin)
    }

    pub fn method(&self, class: &str, selector: &str) -> Option<&Arc<MethodDef>> {
        self.classes.get(class)?.methods.get(selector)
    }

    /// Finds the single user class defining `selector`, if unambiguous.
    pub fn class_defining(&self, selector: &str) -> Option<&str> {
        let mut found = self.user_classes().filter(|c| c.methods.contains_key(selector));
        let first = found.next()?;
        if found.next().is_some() {
            return None;
        }
        Some(&first.name)
    }

    fn rehash(&mut self) {
        let mut h = Sha256::new();
        for c in self.classes.values() {
            hash_field(&mut h, b"class");
            hash_field(&mut h, c.name.as_bytes());
            h.update((c.ivars.len() as u64).to_le_bytes());
            for v in &c.ivars {
                hash_field(&mut h, v.as_bytes());
            }
            h.update((c.class_vars.len() as u64).to_le_bytes());
            for (n, v) in &c.class_vars {
                hash_field(&mut h, n.as_bytes());
                hash_value(&mut h, v);
            }
            h.update((c.methods.len() as u64).to_le_bytes());
            for m in c.methods.values() {
                hash_field(&mut h, m.selector.as_bytes());
                hash_field(&mut h, m.source.as_bytes());
            }
        }
        self.hash = CodeHash(h.finalize().into());
    }

    /// Rewrites every file-open primitive to open the file at the session's
    /// origin process. Idempotent; the code hash is unaffected because method
    /// sources do not change.
    pub fn instrument_file_opens(&self) -> ProgramImage {
        let mut out = self.clone();
        out.instrumented = true;
        for c in out.classes.values_mut() {
            for m in c.methods.values_mut() {
                let code = m.code.rewrite(&instrument_instr);
                *m = Arc::new(MethodDef { code: Arc::new(code), ..(**m).clone() });
            }
        }
        out
    }

    /// Applies a patch to a copy of this image. Either every change applies
    /// or the image is left untouched and an error returned.
    pub fn apply_patch(&self, patch: &Patch) -> Result<(ProgramImage, Vec<Migration>), PatchError> {
        let mut next = self.clone();
        let mut migrations = Vec::new();
        for change in &patch.changes {
            if let Some(m) = next.apply_change(change)? {
                migrations.push(m);
            }
        }
        if next.instrumented {
            next = next.instrument_file_opens();
        }
        next.rehash();
        Ok((next, migrations))
    }

    /// Applies a patch in place and migrates instances in the given states.
    pub fn apply_patch_to(
        &mut self,
        patch: &Patch,
        states: &mut [&mut ExecutionState],
    ) -> Result<(), PatchError> {
        let (next, migrations) = self.apply_patch(patch)?;
        for st in states.iter_mut() {
            st.migrate(&migrations);
        }
        *self = next;
        Ok(())
    }

    fn class_mut(&mut self, name: &str) -> Result<&mut ClassDef, PatchError> {
        self.classes.get_mut(name).ok_or_else(|| PatchError::UnknownClass(name.to_string()))
    }

    fn apply_change(&mut self, change: &ChangeRecord) -> Result<Option<Migration>, PatchError> {
        match change {
            ChangeRecord::AddClass { source } => {
                let ast = parse_class(source).map_err(LoadError::from)?;
                if self.classes.contains_key(&ast.name) {
                    return Err(PatchError::ConflictingChange(format!("class {} already exists", ast.name)));
                }
                let c = build_class(&ast, false)?;
                self.classes.insert(c.name.clone(), c);
                Ok(None)
            }
            ChangeRecord::RemoveClass { name } => {
                self.classes.remove(name).ok_or_else(|| PatchError::UnknownClass(name.clone()))?;
                Ok(None)
            }
            ChangeRecord::AddIvar { class, name } => {
                let c = self.class_mut(class)?;
                if c.ivars.contains(name) || c.class_var(name).is_some() {
                    return Err(PatchError::ConflictingChange(format!("{class} already has variable {name}")));
                }
                c.ivars.push(name.clone());
                c.recompile_all()?;
                Ok(Some(Migration::AddIvar { class: class.clone(), index: c.ivars.len() - 1 }))
            }
            ChangeRecord::RemoveIvar { class, name } => {
                let c = self.class_mut(class)?;
                let index = c
                    .ivar_index(name)
                    .ok_or_else(|| PatchError::ConflictingChange(format!("{class} has no instance variable {name}")))?;
                c.ivars.remove(index);
                c.recompile_all()?;
                Ok(Some(Migration::RemoveIvar { class: class.clone(), index }))
            }
            ChangeRecord::AddClassVar { class, name } => {
                let c = self.class_mut(class)?;
                if c.class_var(name).is_some() || c.ivars.contains(name) {
                    return Err(PatchError::ConflictingChange(format!("{class} already has variable {name}")));
                }
                c.class_vars.push((name.clone(), Value::Nil));
                c.recompile_all()?;
                Ok(None)
            }
            ChangeRecord::RemoveClassVar { class, name } => {
                let c = self.class_mut(class)?;
                let before = c.class_vars.len();
                c.class_vars.retain(|(n, _)| n != name);
                if c.class_vars.len() == before {
                    return Err(PatchError::ConflictingChange(format!("{class} has no class variable {name}")));
                }
                c.recompile_all()?;
                Ok(Some(Migration::RemoveClassVar { class: class.clone(), name: name.clone() }))
            }
            ChangeRecord::AddMethod { class, source } => {
                let ast = parse_method(source).map_err(LoadError::from)?;
                let c = self.class_mut(class)?;
                if c.methods.contains_key(&ast.selector) {
                    return Err(PatchError::ConflictingChange(format!("{class} already defines {}", ast.selector)));
                }
                let m = c.compile_method(&ast)?;
                c.methods.insert(ast.selector.clone(), Arc::new(m));
                Ok(None)
            }
            ChangeRecord::ChangeMethod { class, selector, source } => {
                let ast = parse_method(source).map_err(LoadError::from)?;
                if &ast.selector != selector {
                    return Err(PatchError::ConflictingChange(format!(
                        "source defines {} but change targets {selector}",
                        ast.selector
                    )));
                }
                let c = self.class_mut(class)?;
                let old_line = match c.methods.get(selector) {
                    Some(m) => m.line,
                    None => {
                        return Err(PatchError::ConflictingChange(format!("{class} does not define {selector}")))
                    }
                };
                let mut m = c.compile_method(&ast)?;
                m.line = old_line;
                c.methods.insert(selector.clone(), Arc::new(m));
                Ok(None)
            }
            ChangeRecord::RemoveMethod { class, selector } => {
                let c = self.class_mut(class)?;
                c.methods
                    .remove(selector)
                    .ok_or_else(|| PatchError::ConflictingChange(format!("{class} does not define {selector}")))?;
                Ok(None)
            }
        }
    }
}

fn instrument_instr(i: &Instr) -> Option<Instr> {
    match i {
        Instr::Prim { prim: Prim::FileOpen, argc } => Some(Instr::Prim { prim: Prim::RemoteFileOpen, argc: *argc }),
        _ => None,
    }
}

/// Heap-level consequence of a class shape change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Migration {
    AddIvar { class: String, index: usize },
    RemoveIvar { class: String, index: usize },
    RemoveClassVar { class: String, name: String },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_program_has_stable_hash() {
        let a = ProgramImage::load("").unwrap();
        let b = ProgramImage::load("  // nothing\n").unwrap();
        assert_eq!(a.user_classes().count(), 0);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn duplicates_rejected() {
        assert_eq!(
            ProgramImage::load("class A { } class A { }").unwrap_err(),
            LoadError::DuplicateClass("A".into())
        );
        assert!(matches!(
            ProgramImage::load("class A { method m() { } method m() { } }").unwrap_err(),
            LoadError::DuplicateSelector { .. }
        ));
        assert!(matches!(
            ProgramImage::load("class A { var x, x; }").unwrap_err(),
            LoadError::DuplicateVariable { .. }
        ));
        assert_eq!(ProgramImage::load("class Block { }").unwrap_err(), LoadError::DuplicateClass("Block".into()));
    }

    #[test]
    fn hash_ignores_class_order_but_not_source() {
        let a = ProgramImage::load("class A { } class B { method m() { return 1; } }").unwrap();
        let b = ProgramImage::load("class B { method m() { return 1; } } class A { }").unwrap();
        let c = ProgramImage::load("class B { method m() { return 2; } } class A { }").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn instrumentation_is_idempotent_and_hash_neutral() {
        let img = ProgramImage::load("class A { method m(p) { return @fileOpen(p); } }").unwrap();
        let once = img.instrument_file_opens();
        let twice = once.instrument_file_opens();
        assert_eq!(once, twice);
        assert_eq!(once.hash(), img.hash());
        let code = &once.method("A", "m").unwrap().code;
        assert!(code.instrs.contains(&Instr::Prim { prim: Prim::RemoteFileOpen, argc: 1 }));
    }

    #[test]
    fn patch_conflicts_leave_image_untouched() {
        let img = ProgramImage::load("class A { var x; method m() { return x; } }").unwrap();
        let p = Patch::new(1, img.hash(), vec![
            ChangeRecord::AddIvar { class: "A".into(), name: "y".into() },
            ChangeRecord::AddIvar { class: "A".into(), name: "x".into() },
        ]);
        assert!(matches!(img.apply_patch(&p), Err(PatchError::ConflictingChange(_))));
        let p = Patch::new(2, img.hash(), vec![ChangeRecord::RemoveIvar { class: "A".into(), name: "x".into() }]);
        // `m` still reads x, so recompilation fails and the patch is rejected.
        assert!(matches!(img.apply_patch(&p), Err(PatchError::Compile(_))));
        let p = Patch::new(3, img.hash(), vec![ChangeRecord::AddIvar { class: "Nope".into(), name: "y".into() }]);
        assert_eq!(img.apply_patch(&p).unwrap_err(), PatchError::UnknownClass("Nope".into()));
    }

    #[test]
    fn empty_patch_keeps_hash() {
        let img = ProgramImage::load("class A { }").unwrap();
        let (next, m) = img.apply_patch(&Patch::new(1, img.hash(), vec![])).unwrap();
        assert_eq!(next.hash(), img.hash());
        assert!(m.is_empty());
    }
}
