use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// How a function's code was built relative to the return-stack scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LibraryMode {
    /// Instrumented.
    #[default]
    Secure,
    /// Uninstrumented, but never touches the dedicated register.
    Aware,
    /// Uninstrumented legacy code that saves and restores the dedicated
    /// register like any other callee-saved register.
    Compatible,
}

impl LibraryMode {
    pub fn name(self) -> &'static str {
        match self {
            LibraryMode::Secure => "secure",
            LibraryMode::Aware => "aware",
            LibraryMode::Compatible => "compatible",
        }
    }
}

impl fmt::Display for LibraryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for LibraryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "secure" => Ok(LibraryMode::Secure),
            "aware" => Ok(LibraryMode::Aware),
            "compatible" => Ok(LibraryMode::Compatible),
            other => Err(format!("unknown library mode `{other}` (expected secure, aware or compatible)")),
        }
    }
}

/// Frame shape of one function.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FuncDesc {
    pub name: String,
    pub callee_saved_spills: usize,
    /// Bytes of local variables; a multiple of 16.
    pub locals_bytes: u64,
    #[serde(default)]
    pub calls: Vec<String>,
    #[serde(default)]
    pub library: LibraryMode,
}

impl FuncDesc {
    pub fn new(name: impl Into<String>, callee_saved_spills: usize, locals_bytes: u64) -> Self {
        FuncDesc { name: name.into(), callee_saved_spills, locals_bytes, calls: Vec::new(), library: LibraryMode::Secure }
    }

    /// One saved register and 64 bytes of locals.
    pub fn canonical() -> Self {
        FuncDesc::new("f", 1, 64)
    }

    pub fn with_library(mut self, library: LibraryMode) -> Self {
        self.library = library;
        self
    }

    pub fn calling<I, S>(mut self, callees: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.calls = callees.into_iter().map(Into::into).collect();
        self
    }
}

/// A concrete execution: call `func`, run the children in order, return.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallTree {
    pub func: FuncDesc,
    pub children: Vec<CallTree>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("function `{0}` is not defined")]
    Undefined(String),
    #[error("call graph is recursive through `{0}`")]
    Recursive(String),
}

impl CallTree {
    pub fn leaf(func: FuncDesc) -> Self {
        CallTree { func, children: Vec::new() }
    }

    /// Expands the static call lists of `funcs` starting at `entry`.
    pub fn from_program(funcs: &HashMap<String, FuncDesc>, entry: &str) -> Result<CallTree, ProgramError> {
        fn go(
            funcs: &HashMap<String, FuncDesc>,
            name: &str,
            path: &mut Vec<String>,
        ) -> Result<CallTree, ProgramError> {
            if path.iter().any(|p| p == name) {
                return Err(ProgramError::Recursive(name.to_string()));
            }
            let func = funcs.get(name).ok_or_else(|| ProgramError::Undefined(name.to_string()))?.clone();
            path.push(name.to_string());
            let children = func.calls.iter().map(|c| go(funcs, c, path)).collect::<Result<_, _>>()?;
            path.pop();
            Ok(CallTree { func, children })
        }
        go(funcs, entry, &mut Vec::new())
    }

    /// `depth` nested calls of `func`.
    pub fn chain(func: &FuncDesc, depth: usize) -> CallTree {
        let mut tree = CallTree::leaf(func.clone());
        for _ in 1..depth {
            tree = CallTree { func: func.clone(), children: vec![tree] };
        }
        tree
    }

    /// Nesting depth; a lone function has depth 1.
    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(CallTree::depth).max().unwrap_or(0)
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(CallTree::size).sum::<usize>()
    }

    /// Calls in execution order.
    pub fn preorder(&self) -> Vec<&FuncDesc> {
        let mut out = vec![&self.func];
        for c in &self.children {
            out.extend(c.preorder());
        }
        out
    }

    /// Random tree of at most `max_nodes` calls and depth `max_depth`, drawn
    /// from `pool`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, pool: &[FuncDesc], max_nodes: usize, max_depth: usize) -> CallTree {
        fn grow<R: Rng + ?Sized>(
            rng: &mut R,
            pool: &[FuncDesc],
            budget: &mut usize,
            depth_left: usize,
        ) -> CallTree {
            let func = pool[rng.gen_range(0..pool.len())].clone();
            *budget -= 1;
            let mut children = Vec::new();
            if depth_left > 1 {
                let fanout = rng.gen_range(0..=3usize);
                for _ in 0..fanout {
                    if *budget == 0 {
                        break;
                    }
                    children.push(grow(rng, pool, budget, depth_left - 1));
                }
            }
            CallTree { func, children }
        }
        let mut budget = max_nodes.max(1);
        grow(rng, pool, &mut budget, max_depth.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn program_expansion() {
        let funcs: HashMap<_, _> = [
            FuncDesc::new("main", 1, 16).calling(["a", "b"]),
            FuncDesc::new("a", 0, 0).calling(["b"]),
            FuncDesc::new("b", 2, 32),
        ]
        .into_iter()
        .map(|f| (f.name.clone(), f))
        .collect();
        let t = CallTree::from_program(&funcs, "main").unwrap();
        assert_eq!(t.depth(), 3);
        assert_eq!(t.size(), 4);
        let names: Vec<&str> = t.preorder().iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, ["main", "a", "b", "b"]);
    }

    #[test]
    fn recursion_and_undefined_rejected() {
        let mut funcs = HashMap::new();
        funcs.insert("a".to_string(), FuncDesc::new("a", 0, 0).calling(["a"]));
        assert_eq!(CallTree::from_program(&funcs, "a"), Err(ProgramError::Recursive("a".into())));
        assert_eq!(CallTree::from_program(&funcs, "zz"), Err(ProgramError::Undefined("zz".into())));
    }

    #[test]
    fn chain_depth() {
        assert_eq!(CallTree::chain(&FuncDesc::canonical(), 29).depth(), 29);
        assert_eq!(CallTree::chain(&FuncDesc::canonical(), 1).depth(), 1);
    }
}
