use std::fmt;

use thiserror::Error;

/// Labeled ordered tree. Leaves carry terminal labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConstTree {
    pub label: String,
    pub children: Vec<ConstTree>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("unexpected end of input at byte {0}")]
    UnexpectedEnd(usize),
    #[error("expected '(' at byte {0}")]
    ExpectedOpen(usize),
    #[error("empty brackets at byte {0}")]
    EmptyBrackets(usize),
    #[error("unbalanced ')' at byte {0}")]
    Unbalanced(usize),
    #[error("trailing input at byte {0}")]
    Trailing(usize),
}

impl ConstTree {
    pub fn leaf(label: impl Into<String>) -> Self {
        ConstTree {
            label: label.into(),
            children: Vec::new(),
        }
    }

    pub fn node(label: impl Into<String>, children: Vec<ConstTree>) -> Self {
        ConstTree {
            label: label.into(),
            children,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(ConstTree::size).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(ConstTree::depth).max().unwrap_or(0)
    }

    /// Terminal labels, left to right.
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        if self.is_leaf() {
            out.push(&self.label);
        }
        for c in &self.children {
            c.collect_leaves(out);
        }
    }

    /// Copy keeping levels `1..=depth` (the root is level 1).
    pub fn truncate(&self, depth: usize) -> ConstTree {
        ConstTree {
            label: self.label.clone(),
            children: if depth <= 1 {
                Vec::new()
            } else {
                self.children.iter().map(|c| c.truncate(depth - 1)).collect()
            },
        }
    }

    /// Applies `f` to every label.
    pub fn map_labels(&self, f: &mut impl FnMut(&str) -> String) -> ConstTree {
        ConstTree {
            label: f(&self.label),
            children: self.children.iter().map(|c| c.map_labels(f)).collect(),
        }
    }
}

/// Bracketed form. Leaves print bare inside their parent, and as `(X)` at the root.
impl fmt::Display for ConstTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}", self.label)?;
        for c in &self.children {
            if c.is_leaf() {
                write!(f, " {}", c.label)?;
            } else {
                write!(f, " {c}")?;
            }
        }
        write!(f, ")")
    }
}

/// Parses Penn-style bracketing such as `(S (NP (DT a) (NN child)) (VP ...))`.
///
/// Bare atoms and `(X)` both denote leaves.
pub fn parse_bracketed(text: &str) -> Result<ConstTree, ParseError> {
    let bytes = text.as_bytes();
    let mut pos = skip_ws(bytes, 0);
    if pos >= bytes.len() {
        return Err(ParseError::UnexpectedEnd(pos));
    }
    if bytes[pos] != b'(' {
        return Err(ParseError::ExpectedOpen(pos));
    }
    let tree = parse_node(text, &mut pos)?;
    let end = skip_ws(bytes, pos);
    if end < bytes.len() {
        return Err(if bytes[end] == b')' {
            ParseError::Unbalanced(end)
        } else {
            ParseError::Trailing(end)
        });
    }
    Ok(tree)
}

fn skip_ws(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    pos
}

fn atom_end(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'(' && bytes[pos] != b')' {
        pos += 1;
    }
    pos
}

// `pos` points at '('.
fn parse_node(text: &str, pos: &mut usize) -> Result<ConstTree, ParseError> {
    let bytes = text.as_bytes();
    let open = *pos;
    *pos = skip_ws(bytes, open + 1);
    if *pos >= bytes.len() {
        return Err(ParseError::UnexpectedEnd(*pos));
    }
    if bytes[*pos] == b')' || bytes[*pos] == b'(' {
        return Err(ParseError::EmptyBrackets(open));
    }
    let end = atom_end(bytes, *pos);
    let label = text[*pos..end].to_string();
    *pos = end;
    let mut children = Vec::new();
    loop {
        *pos = skip_ws(bytes, *pos);
        match bytes.get(*pos) {
            None => return Err(ParseError::UnexpectedEnd(*pos)),
            Some(b')') => {
                *pos += 1;
                return Ok(ConstTree { label, children });
            }
            Some(b'(') => children.push(parse_node(text, pos)?),
            Some(_) => {
                let end = atom_end(bytes, *pos);
                children.push(ConstTree::leaf(&text[*pos..end]));
                *pos = end;
            }
        }
    }
}

/// True iff both trees, cut below `depth` (root = level 1), have identical labels and shape.
pub fn template_match(t1: &ConstTree, t2: &ConstTree, depth: usize) -> bool {
    fn eq(a: &ConstTree, b: &ConstTree, depth: usize) -> bool {
        if a.label != b.label {
            return false;
        }
        if depth <= 1 {
            return true;
        }
        a.children.len() == b.children.len() && a.children.iter().zip(&b.children).all(|(x, y)| eq(x, y, depth - 1))
    }
    eq(t1, t2, depth)
}

struct Postorder<'a> {
    labels: Vec<&'a str>,
    /// Leftmost leaf descendant of every node, in postorder indices.
    lmld: Vec<usize>,
    keyroots: Vec<usize>,
}

impl<'a> Postorder<'a> {
    fn new(t: &'a ConstTree) -> Self {
        let mut p = Postorder {
            labels: Vec::new(),
            lmld: Vec::new(),
            keyroots: Vec::new(),
        };
        p.visit(t);
        let n = p.labels.len();
        let mut seen = std::collections::HashSet::new();
        for i in (0..n).rev() {
            if seen.insert(p.lmld[i]) {
                p.keyroots.push(i);
            }
        }
        p.keyroots.sort_unstable();
        p
    }

    fn visit(&mut self, t: &'a ConstTree) -> usize {
        let mut first = None;
        for c in &t.children {
            let idx = self.visit(c);
            first.get_or_insert(self.lmld[idx]);
        }
        let idx = self.labels.len();
        self.labels.push(&t.label);
        self.lmld.push(first.unwrap_or(idx));
        idx
    }
}

/// Zhang–Shasha ordered tree edit distance with unit insert, delete and relabel costs.
pub fn tree_edit_distance(t1: &ConstTree, t2: &ConstTree) -> usize {
    let a = Postorder::new(t1);
    let b = Postorder::new(t2);
    let (n, m) = (a.labels.len(), b.labels.len());
    let mut td = vec![vec![0usize; m]; n];
    let mut fd = vec![vec![0usize; m + 1]; n + 1];
    for &i in &a.keyroots {
        for &j in &b.keyroots {
            let (li, lj) = (a.lmld[i], b.lmld[j]);
            // fd[x][y]: forest a[li..li+x) vs b[lj..lj+y).
            let (rows, cols) = (i - li + 1, j - lj + 1);
            fd[0][0] = 0;
            for x in 1..=rows {
                fd[x][0] = fd[x - 1][0] + 1;
            }
            for y in 1..=cols {
                fd[0][y] = fd[0][y - 1] + 1;
            }
            for x in 1..=rows {
                let ni = li + x - 1;
                for y in 1..=cols {
                    let nj = lj + y - 1;
                    let del = fd[x - 1][y] + 1;
                    let ins = fd[x][y - 1] + 1;
                    if a.lmld[ni] == li && b.lmld[nj] == lj {
                        let rel = fd[x - 1][y - 1] + usize::from(a.labels[ni] != b.labels[nj]);
                        fd[x][y] = del.min(ins).min(rel);
                        td[ni][nj] = fd[x][y];
                    } else {
                        let (px, py) = (a.lmld[ni] - li, b.lmld[nj] - lj);
                        fd[x][y] = del.min(ins).min(fd[px][py] + td[ni][nj]);
                    }
                }
            }
        }
    }
    td[n - 1][m - 1]
}
