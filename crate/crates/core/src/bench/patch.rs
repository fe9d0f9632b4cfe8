use super::{BenchConfig, BenchError, Mode, Pair, Report};
use crate::vm::ChangeRecord;
use crate::workloads::TWEETS;

const BENCH: &str = "patch-bytes";

/// The class the changes are made to.
pub const TEST_CLASS: &str = "class Test01 {
  var count;
  method increment() {
    count := count + 1;
    return count;
  }
}
";
const METHOD: &str = "method increment() {
    count := count + 1;
    return count;
  }";
const ADDED_LINE: &str = "if (count == nil) { count := 0; }\n    ";
const IVAR: &str = ", instanceVariable";
const CLASS_VAR: &str = "classvar classVariable;\n  ";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchKind {
    Noop,
    AddClass,
    AddIvar,
    AddClassVar,
    ChangeMethod,
}

impl PatchKind {
    pub const ALL: [PatchKind; 5] =
        [PatchKind::Noop, PatchKind::AddClass, PatchKind::AddIvar, PatchKind::AddClassVar, PatchKind::ChangeMethod];

    pub fn name(self) -> &'static str {
        match self {
            PatchKind::Noop => "noop",
            PatchKind::AddClass => "addClass",
            PatchKind::AddIvar => "addIvar",
            PatchKind::AddClassVar => "addClassVar",
            PatchKind::ChangeMethod => "changeMethod",
        }
    }

    pub fn parse(s: &str) -> Option<PatchKind> {
        PatchKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Upper (and for `Noop` lower) bound on the oop/baseline byte ratio.
    pub fn bound(self) -> Option<(f64, f64)> {
        match self {
            PatchKind::Noop => Some((0.5, 2.0)),
            PatchKind::AddClass => Some((0.0, 0.33)),
            PatchKind::ChangeMethod => Some((0.0, 0.2)),
            PatchKind::AddIvar | PatchKind::AddClassVar => None,
        }
    }

    fn program(self) -> String {
        match self {
            PatchKind::AddClass => TWEETS.to_string(),
            _ => format!("{TWEETS}\n{TEST_CLASS}"),
        }
    }

    fn change(self) -> Option<ChangeRecord> {
        let class = "Test01".to_string();
        Some(match self {
            PatchKind::Noop => return None,
            PatchKind::AddClass => ChangeRecord::AddClass { source: TEST_CLASS.to_string() },
            PatchKind::AddIvar => ChangeRecord::AddIvar { class, name: "instanceVariable".into() },
            PatchKind::AddClassVar => ChangeRecord::AddClassVar { class, name: "classVariable".into() },
            PatchKind::ChangeMethod => ChangeRecord::ChangeMethod {
                class,
                selector: "increment".into(),
                source: METHOD.replacen("count := count", &format!("{ADDED_LINE}count := count"), 1),
            },
        })
    }
}

/// Every intermediate buffer while typing `insert` at `at` into `text`.
fn keystrokes(text: &str, at: usize, insert: &str) -> Vec<String> {
    let (head, tail) = text.split_at(at);
    insert.char_indices().map(|(i, c)| format!("{head}{}{tail}", &insert[..i + c.len_utf8()])).collect()
}

/// Out-of-place: the change is recorded locally and committed as one patch.
fn oop_bytes(kind: PatchKind, pair: &Pair) -> Result<u64, BenchError> {
    let before = pair.bytes();
    if let Some(c) = kind.change() {
        pair.mgr.record_change(c)?;
    }
    pair.mgr.commit(None)?;
    Ok(pair.bytes() - before)
}

/// Baseline: a remote browser lists the classes, shows the definition
/// being edited, sends the buffer on every keystroke and finally accepts.
fn baseline_bytes(kind: PatchKind, pair: &Pair) -> Result<u64, BenchError> {
    let m = pair.mon.id();
    let mgr = &pair.mgr;
    let before = pair.bytes();
    mgr.remote_browse(m, "classes")?;
    let (target, buffers) = match kind {
        PatchKind::Noop => {
            let src = mgr.remote_browse(m, "method:Test01>>increment")?;
            ("method:Test01", vec![src])
        }
        PatchKind::AddClass => ("class", keystrokes("", 0, TEST_CLASS)),
        PatchKind::AddIvar => {
            let def = mgr.remote_browse(m, "class:Test01")?;
            let at = def.find("var count").ok_or_else(|| BenchError::Unexpected(def.clone()))? + "var count".len();
            ("class", keystrokes(&def, at, IVAR))
        }
        PatchKind::AddClassVar => {
            let def = mgr.remote_browse(m, "class:Test01")?;
            let at = def.find("var count").ok_or_else(|| BenchError::Unexpected(def.clone()))?;
            ("class", keystrokes(&def, at, CLASS_VAR))
        }
        PatchKind::ChangeMethod => {
            let src = mgr.remote_browse(m, "method:Test01>>increment")?;
            let at = src.find("count :=").ok_or_else(|| BenchError::Unexpected(src.clone()))?;
            ("method:Test01", keystrokes(&src, at, ADDED_LINE))
        }
    };
    let last = buffers.len() - 1;
    for (i, b) in buffers.iter().enumerate() {
        mgr.remote_edit(m, target, b, i == last)?;
    }
    Ok(pair.bytes() - before)
}

/// Bytes to get one code change applied at the monitor, per mode.
pub fn patch_bytes(cfg: &BenchConfig, kinds: &[PatchKind]) -> Result<Report, BenchError> {
    let mut rep = Report::default();
    for &kind in kinds {
        let mut by_mode = Vec::new();
        for &mode in &cfg.modes {
            let pair = Pair::new(&kind.program(), mode, cfg.latency)?;
            let bytes = match mode {
                Mode::Oop => oop_bytes(kind, &pair)?,
                Mode::Baseline => baseline_bytes(kind, &pair)?,
            };
            if let Some(c) = kind.change() {
                let applied = match &c {
                    ChangeRecord::AddClass { .. } => pair.mon.image().class("Test01").is_some(),
                    ChangeRecord::AddIvar { name, .. } => {
                        pair.mon.image().class("Test01").is_some_and(|c| c.ivars.contains(name))
                    }
                    ChangeRecord::AddClassVar { name, .. } => {
                        pair.mon.image().class("Test01").is_some_and(|c| c.class_var(name).is_some())
                    }
                    _ => pair.mon.image().method("Test01", "increment").is_some_and(|m| m.source.contains("nil")),
                };
                if !applied {
                    return Err(BenchError::Unexpected(format!("{} not applied in {} mode", kind.name(), mode.name())));
                }
            }
            rep.row(BENCH, mode.name(), kind.name(), "bytes", bytes as f64);
            by_mode.push((mode, bytes as f64));
        }
        if let [(Mode::Oop, o), (Mode::Baseline, b)] = by_mode[..] {
            let ratio = o / b;
            rep.row(BENCH, "ratio", kind.name(), "oop_over_baseline", ratio);
            if let Some((lo, hi)) = kind.bound() {
                rep.check(
                    format!("{}: oop/baseline in [{lo}, {hi}]", kind.name()),
                    (lo..=hi).contains(&ratio),
                    format!("{o:.0} / {b:.0} = {ratio:.3}"),
                );
            }
        }
    }
    Ok(rep)
}
