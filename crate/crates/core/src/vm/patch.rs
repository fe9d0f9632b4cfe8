use serde::{Deserialize, Serialize};

use super::image::CodeHash;
use crate::codec::{DecodeError, Reader, Writer};

/// One recorded code change. Sources are complete `class`/`method`
/// declarations in guest syntax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChangeRecord {
    AddClass { source: String },
    RemoveClass { name: String },
    AddIvar { class: String, name: String },
    RemoveIvar { class: String, name: String },
    AddClassVar { class: String, name: String },
    RemoveClassVar { class: String, name: String },
    AddMethod { class: String, source: String },
    ChangeMethod { class: String, selector: String, source: String },
    RemoveMethod { class: String, selector: String },
}

impl ChangeRecord {
    fn tag(&self) -> u8 {
        match self {
            ChangeRecord::AddClass { .. } => 1,
            ChangeRecord::RemoveClass { .. } => 2,
            ChangeRecord::AddIvar { .. } => 3,
            ChangeRecord::RemoveIvar { .. } => 4,
            ChangeRecord::AddClassVar { .. } => 5,
            ChangeRecord::RemoveClassVar { .. } => 6,
            ChangeRecord::AddMethod { .. } => 7,
            ChangeRecord::ChangeMethod { .. } => 8,
            ChangeRecord::RemoveMethod { .. } => 9,
        }
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u8(self.tag());
        match self {
            ChangeRecord::AddClass { source } => w.str(source),
            ChangeRecord::RemoveClass { name } => w.str(name),
            ChangeRecord::AddIvar { class, name }
            | ChangeRecord::RemoveIvar { class, name }
            | ChangeRecord::AddClassVar { class, name }
            | ChangeRecord::RemoveClassVar { class, name } => {
                w.str(class);
                w.str(name);
            }
            ChangeRecord::AddMethod { class, source } => {
                w.str(class);
                w.str(source);
            }
            ChangeRecord::ChangeMethod { class, selector, source } => {
                w.str(class);
                w.str(selector);
                w.str(source);
            }
            ChangeRecord::RemoveMethod { class, selector } => {
                w.str(class);
                w.str(selector);
            }
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<ChangeRecord, DecodeError> {
        let tag = r.u8()?;
        let s = |r: &mut Reader<'_>| r.str().map(str::to_string);
        Ok(match tag {
            1 => ChangeRecord::AddClass { source: s(r)? },
            2 => ChangeRecord::RemoveClass { name: s(r)? },
            3 => ChangeRecord::AddIvar { class: s(r)?, name: s(r)? },
            4 => ChangeRecord::RemoveIvar { class: s(r)?, name: s(r)? },
            5 => ChangeRecord::AddClassVar { class: s(r)?, name: s(r)? },
            6 => ChangeRecord::RemoveClassVar { class: s(r)?, name: s(r)? },
            7 => ChangeRecord::AddMethod { class: s(r)?, source: s(r)? },
            8 => ChangeRecord::ChangeMethod { class: s(r)?, selector: s(r)?, source: s(r)? },
            9 => ChangeRecord::RemoveMethod { class: s(r)?, selector: s(r)? },
            tag => return Err(DecodeError::BadTag { what: "change record", tag }),
        })
    }
}

/// An ordered list of changes, applied all-or-nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub patch_id: u64,
    pub base_hash: CodeHash,
    /// Code hash the sender expects after applying; checked before the
    /// new code replaces the old.
    pub target_hash: Option<CodeHash>,
    pub changes: Vec<ChangeRecord>,
}

impl Patch {
    pub fn new(patch_id: u64, base_hash: CodeHash, changes: Vec<ChangeRecord>) -> Patch {
        Patch { patch_id, base_hash, target_hash: None, changes }
    }

    pub fn with_target(mut self, target: CodeHash) -> Patch {
        self.target_hash = Some(target);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.changes.is_empty()
    }

    /// Encodes the change list (the patch id travels in the wire message).
    pub fn encode_changes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.base_hash.0);
        match &self.target_hash {
            Some(t) => {
                w.u8(1);
                w.raw(&t.0);
            }
            None => w.u8(0),
        }
        w.u32(self.changes.len() as u32);
        for c in &self.changes {
            c.encode(&mut w);
        }
        w.finish()
    }

    pub fn decode_changes(patch_id: u64, bytes: &[u8]) -> Result<Patch, DecodeError> {
        let mut r = Reader::new(bytes);
        let base_hash = CodeHash(r.take(32)?.try_into().expect("32 bytes"));
        let target_hash = match r.u8()? {
            0 => None,
            1 => Some(CodeHash(r.take(32)?.try_into().expect("32 bytes"))),
            tag => return Err(DecodeError::BadTag { what: "target hash", tag }),
        };
        let n = r.count(1)?;
        let changes = (0..n).map(|_| ChangeRecord::decode(&mut r)).collect::<Result<Vec<_>, _>>()?;
        r.expect_end()?;
        Ok(Patch { patch_id, base_hash, target_hash, changes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn changes_round_trip() {
        let p = Patch::new(9, CodeHash([3; 32]), vec![
            ChangeRecord::AddClass { source: "class T { }".into() },
            ChangeRecord::ChangeMethod { class: "T".into(), selector: "m".into(), source: "method m() { }".into() },
            ChangeRecord::RemoveMethod { class: "T".into(), selector: "m".into() },
        ]);
        let bytes = p.encode_changes();
        assert_eq!(Patch::decode_changes(9, &bytes).unwrap(), p);
        assert!(Patch::decode_changes(9, &bytes[..bytes.len() - 1]).is_err());
        let p = p.with_target(CodeHash([7; 32]));
        assert_eq!(Patch::decode_changes(9, &p.encode_changes()).unwrap(), p);
    }
}
