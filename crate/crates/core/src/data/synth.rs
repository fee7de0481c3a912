use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{join_words, Vocab};
use super::{DataError, TripletRecord};
use crate::eval::{parse_bracketed, ConstTree};

/// Default grammar: 12 templates over 20 agents, 20 verbs and 20 patients.
///
/// Verb forms are `base|3sg|past|participle|gerund`.
pub const DEFAULT_SPEC: &str = "\
# synthetic grammar: seed, lexicon (one line per slot type), templates
seed 7
lex agent child man woman boy girl farmer teacher doctor sailor soldier baker painter student dancer driver singer nurse pilot writer hunter
lex verb wear|wears|wore|worn|wearing carry|carries|carried|carried|carrying hold|holds|held|held|holding paint|paints|painted|painted|painting wash|washes|washed|washed|washing find|finds|found|found|finding sell|sells|sold|sold|selling buy|buys|bought|bought|buying build|builds|built|built|building draw|draws|drew|drawn|drawing fix|fixes|fixed|fixed|fixing open|opens|opened|opened|opening move|moves|moved|moved|moving push|pushes|pushed|pushed|pushing pull|pulls|pulled|pulled|pulling clean|cleans|cleaned|cleaned|cleaning lift|lifts|lifted|lifted|lifting drop|drops|dropped|dropped|dropping take|takes|took|taken|taking keep|keeps|kept|kept|keeping
lex patient cloak box chair lamp boat table basket hat coat bag door wagon rope bucket ladder kite drum map bottle shovel
template active (S (NP (DT a) (NN {agent})) (VP (VBZ {verb.1}) (NP (DT a) (NN {patient}))) (. .))
template passive (S (NP (DT a) (NN {patient})) (VP (VBZ is) (VP (VBN {verb.3}) (PP (IN by) (NP (DT a) (NN {agent}))))) (. .))
template fronted_past (S (PP (IN in) (NP (NN winter))) (, ,) (NP (DT a) (NN {agent})) (VP (VBD {verb.2}) (NP (DT a) (NN {patient}))) (. .))
template fronted_passive_past (S (PP (IN in) (NP (NN winter))) (, ,) (NP (DT a) (NN {patient})) (VP (VBD was) (VP (VBN {verb.3}) (PP (IN by) (NP (DT a) (NN {agent}))))) (. .))
template question (SQ (VBZ does) (NP (DT a) (NN {agent})) (VP (VB {verb.0}) (NP (DT a) (NN {patient}))) (. ?))
template passive_question (SQ (VBZ is) (NP (DT a) (NN {patient})) (VP (VBN {verb.3}) (PP (IN by) (NP (DT a) (NN {agent})))) (. ?))
template negation (S (NP (DT a) (NN {agent})) (VP (VBZ does) (RB not) (VP (VB {verb.0}) (NP (DT a) (NN {patient})))) (. .))
template cleft (S (NP (PRP it)) (VP (VBZ is) (NP (NP (DT a) (NN {agent})) (SBAR (WHNP (WDT that)) (S (VP (VBZ {verb.1}) (NP (DT a) (NN {patient}))))))) (. .))
template topicalized (S (NP (DT a) (NN {patient})) (, ,) (NP (DT a) (NN {agent})) (VP (VBD {verb.2})) (. .))
template progressive (S (NP (DT a) (NN {agent})) (VP (VBZ is) (VP (VBG {verb.4}) (NP (DT a) (NN {patient})))) (PP (IN in) (NP (NN winter))) (. .))
template passive_medial (S (NP (DT a) (NN {patient})) (VP (VBZ is) (VP (VBN {verb.3}) (, ,) (PP (IN in) (NP (NN winter))) (, ,) (PP (IN by) (NP (DT a) (NN {agent}))))) (. .))
template past_question (SQ (VBD did) (NP (DT a) (NN {agent})) (VP (VB {verb.0}) (NP (DT a) (NN {patient}))) (. ?))
";

#[derive(Debug, Clone, PartialEq)]
enum Leaf {
    Word(String),
    Slot { ty: usize, form: usize },
}

/// A bracketed tree pattern whose leaves may be `{type}` or `{type.form}` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub name: String,
    pub pattern: ConstTree,
    leaves: Vec<Leaf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Slot types in declaration order; the content tuple follows this order.
    pub types: Vec<String>,
    /// `lexicon[type][entry][form]`.
    pub lexicon: Vec<Vec<Vec<String>>>,
    pub templates: Vec<Template>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SynthSentence {
    pub text: String,
    pub template: usize,
    /// Lexicon entry per slot type.
    pub content: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthTriplet {
    pub target: SynthSentence,
    /// Same content as the target, different template.
    pub sem_src: SynthSentence,
    /// Same template as the target, different content.
    pub syn_src: SynthSentence,
}

impl SynthTriplet {
    pub fn record(&self) -> TripletRecord {
        TripletRecord {
            target: self.target.text.clone(),
            sem_src: self.sem_src.text.clone(),
            syn_src: self.syn_src.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub sentences: Vec<SynthSentence>,
    pub triplets: Vec<SynthTriplet>,
}

pub fn default_spec() -> SynthSpec {
    SynthSpec::parse(DEFAULT_SPEC).expect("built-in grammar is valid")
}

impl SynthSpec {
    /// Parses the line format of [`DEFAULT_SPEC`]: `seed N`, `lex TYPE ENTRY...`
    /// (forms joined by `|`) and `template NAME TREE`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let err = |line: usize, msg: String| DataError::Spec { line, msg };
        let mut types = Vec::new();
        let mut lexicon = Vec::new();
        let mut raw_templates = Vec::new();
        let mut seed = 0;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (kw, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match kw {
                "seed" => seed = rest.parse().map_err(|_| err(line_no, format!("bad seed '{rest}'")))?,
                "lex" => {
                    let mut parts = rest.split_whitespace();
                    let ty = parts.next().ok_or_else(|| err(line_no, "lex needs a type name".into()))?;
                    if types.iter().any(|t| t == ty) {
                        return Err(err(line_no, format!("slot type '{ty}' declared twice")));
                    }
                    let entries: Vec<Vec<String>> = parts
                        .map(|e| e.split('|').map(|f| f.to_lowercase()).collect())
                        .collect();
                    if entries.is_empty() {
                        return Err(err(line_no, format!("slot type '{ty}' has an empty lexicon")));
                    }
                    types.push(ty.to_string());
                    lexicon.push(entries);
                }
                "template" => {
                    let (name, tree) = rest
                        .split_once(char::is_whitespace)
                        .ok_or_else(|| err(line_no, "template needs a name and a tree".into()))?;
                    let pattern = parse_bracketed(tree.trim()).map_err(|e| err(line_no, e.to_string()))?;
                    raw_templates.push((line_no, name.to_string(), pattern));
                }
                other => return Err(err(line_no, format!("unknown directive '{other}'"))),
            }
        }
        let mut templates = Vec::new();
        for (line_no, name, pattern) in raw_templates {
            let mut leaves = Vec::new();
            for leaf in pattern.leaves() {
                let parsed = match leaf.strip_prefix('{').and_then(|l| l.strip_suffix('}')) {
                    None => Leaf::Word(leaf.to_lowercase()),
                    Some(slot) => {
                        let (ty_name, form) = match slot.split_once('.') {
                            Some((t, f)) => (t, f.parse().map_err(|_| err(line_no, format!("bad form in '{leaf}'")))?),
                            None => (slot, 0),
                        };
                        let ty = types
                            .iter()
                            .position(|t| t == ty_name)
                            .ok_or_else(|| err(line_no, format!("slot type '{ty_name}' is not in the lexicon")))?;
                        if let Some(entry) = lexicon[ty].iter().find(|e: &&Vec<String>| e.len() <= form) {
                            return Err(err(line_no, format!("'{}' has no form {form}", entry[0])));
                        }
                        Leaf::Slot { ty, form }
                    }
                };
                leaves.push(parsed);
            }
            for (ty, t) in types.iter().enumerate() {
                if !leaves.iter().any(|l| matches!(l, Leaf::Slot { ty: s, .. } if *s == ty)) {
                    return Err(err(line_no, format!("template '{name}' never uses slot type '{t}'")));
                }
            }
            templates.push(Template { name, pattern, leaves });
        }
        if templates.is_empty() {
            return Err(DataError::Synth("no templates".into()));
        }
        Ok(SynthSpec {
            types,
            lexicon,
            templates,
            seed,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Number of distinct content tuples.
    pub fn content_space(&self) -> usize {
        self.lexicon.iter().map(Vec::len).product()
    }

    pub fn words(&self, template: usize, content: &[usize]) -> Vec<String> {
        self.templates[template]
            .leaves
            .iter()
            .map(|l| match l {
                Leaf::Word(w) => w.clone(),
                Leaf::Slot { ty, form } => self.lexicon[*ty][content[*ty]][*form].clone(),
            })
            .collect()
    }

    pub fn sentence(&self, template: usize, content: &[usize]) -> SynthSentence {
        SynthSentence {
            text: join_words(&self.words(template, content)),
            template,
            content: content.to_vec(),
        }
    }

    /// Ground-truth constituency tree of a generated sentence.
    pub fn tree(&self, template: usize, content: &[usize]) -> ConstTree {
        let mut words = self.words(template, content).into_iter();
        fill_leaves(&self.templates[template].pattern, &mut words)
    }

    /// Content tuple as base forms joined by `|`.
    pub fn content_label(&self, content: &[usize]) -> String {
        content
            .iter()
            .enumerate()
            .map(|(ty, &e)| self.lexicon[ty][e][0].as_str())
            .collect::<Vec<_>>()
            .join("|")
    }

    /// Every word the grammar can produce, in first-appearance order.
    pub fn vocab(&self) -> Vocab {
        let mut v = Vocab::new();
        for t in &self.templates {
            for l in &t.leaves {
                if let Leaf::Word(w) = l {
                    v.add(w);
                }
            }
        }
        for entries in &self.lexicon {
            for e in entries {
                for f in e {
                    v.add(f);
                }
            }
        }
        v
    }

    /// Template and content that generate exactly `words`, if any.
    pub fn recognize<S: AsRef<str>>(&self, words: &[S]) -> Option<(usize, Vec<usize>)> {
        let lookup: Vec<HashMap<(&str, usize), usize>> = self
            .lexicon
            .iter()
            .map(|entries| {
                let mut m = HashMap::new();
                for (i, e) in entries.iter().enumerate() {
                    for (f, w) in e.iter().enumerate() {
                        m.entry((w.as_str(), f)).or_insert(i);
                    }
                }
                m
            })
            .collect();
        'templates: for (ti, t) in self.templates.iter().enumerate() {
            if t.leaves.len() != words.len() {
                continue;
            }
            let mut content: Vec<Option<usize>> = vec![None; self.types.len()];
            for (leaf, w) in t.leaves.iter().zip(words) {
                let w = w.as_ref();
                match leaf {
                    Leaf::Word(x) if x == w => {}
                    Leaf::Word(_) => continue 'templates,
                    Leaf::Slot { ty, form } => {
                        let Some(&e) = lookup[*ty].get(&(w, *form)) else {
                            continue 'templates;
                        };
                        match content[*ty] {
                            Some(prev) if prev != e => continue 'templates,
                            _ => content[*ty] = Some(e),
                        }
                    }
                }
            }
            return Some((ti, content.into_iter().map(|c| c.expect("every type is used")).collect()));
        }
        None
    }

    fn decode_content(&self, mut index: usize) -> Vec<usize> {
        self.lexicon
            .iter()
            .map(|entries| {
                let e = index % entries.len();
                index /= entries.len();
                e
            })
            .collect()
    }
}

fn fill_leaves(t: &ConstTree, words: &mut impl Iterator<Item = String>) -> ConstTree {
    if t.is_leaf() {
        return ConstTree::leaf(words.next().expect("one word per leaf"));
    }
    ConstTree::node(t.label.clone(), t.children.iter().map(|c| fill_leaves(c, words)).collect())
}

/// `n` distinct sentences drawn uniformly from templates × contents, plus one
/// evaluation triplet per sentence. Deterministic in `spec.seed`.
pub fn gen_synthetic(spec: &SynthSpec, n: usize) -> Result<SynthCorpus, DataError> {
    let n_t = spec.templates.len();
    let space = spec.content_space();
    let total = n_t * space;
    if n == 0 {
        return Err(DataError::Synth("sentence count must be at least 1".into()));
    }
    if n > total {
        return Err(DataError::Synth(format!("{n} sentences requested but the grammar has only {total}")));
    }
    if n_t < 2 || space < 2 {
        return Err(DataError::Synth("triplets need at least 2 templates and 2 content tuples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let picks = rand::seq::index::sample(&mut rng, total, n);
    let sentences: Vec<SynthSentence> = picks
        .iter()
        .map(|i| spec.sentence(i % n_t, &spec.decode_content(i / n_t)))
        .collect();
    let triplets = sentences
        .iter()
        .map(|target| {
            let other_t = (target.template + rng.gen_range(1..n_t)) % n_t;
            let target_c = spec
                .lexicon
                .iter()
                .enumerate()
                .fold((0, 1), |(acc, radix), (ty, e)| (acc + target.content[ty] * radix, radix * e.len()))
                .0;
            let other_c = (target_c + rng.gen_range(1..space)) % space;
            SynthTriplet {
                target: target.clone(),
                sem_src: spec.sentence(other_t, &target.content),
                syn_src: spec.sentence(target.template, &spec.decode_content(other_c)),
            }
        })
        .collect();
    Ok(SynthCorpus { sentences, triplets })
}

/// TSV with columns `sentence, template_id, content_tuple`.
pub fn write_labels(path: impl AsRef<Path>, spec: &SynthSpec, sentences: &[SynthSentence]) -> std::io::Result<()> {
    let mut s = String::from("sentence\ttemplate_id\tcontent_tuple\n");
    for x in sentences {
        s.push_str(&format!("{}\t{}\t{}\n", x.text, x.template, spec.content_label(&x.content)));
    }
    fs::write(path, s)
}
