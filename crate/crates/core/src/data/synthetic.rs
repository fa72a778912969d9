//! Template-based twin-pair generator.
//!
//! Spec format, one `key = value` per line, `#` starts a comment:
//!
//! ```text
//! template = the {A} could not hold the {B} because {P} was too {T} | 2
//! objects  = trophy/suitcase, ball/bag
//! triggers = big/small, large/tiny
//! pronoun  = it
//! pairs    = 200
//! ```
//!
//! `{A}`/`{B}` take an object pair, `{P}` the pronoun, `{T}` a trigger. The
//! number after `|` is the gold role when the first trigger of a pair is
//! used; the second trigger yields the other role.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{find_word, Corpus, TwinPair, WinogradSchema};
use crate::error::{Error, Result};

const SLOTS: [&str; 4] = ["A", "B", "P", "T"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub text: String,
    pub first_label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub templates: Vec<Template>,
    pub objects: Vec<(String, String)>,
    pub triggers: Vec<(String, String)>,
    pub pronoun: String,
    /// Keep only the first `n` pairs of the shuffled product.
    pub pairs: Option<usize>,
}

impl Default for SynthSpec {
    /// 20 object pairs × 5 trigger pairs × 2 templates = 200 twin pairs.
    fn default() -> Self {
        let split = |s: &str| -> Vec<(String, String)> {
            s.split(',')
                .map(|p| {
                    let (a, b) = p.trim().split_once('/').unwrap();
                    (a.to_string(), b.to_string())
                })
                .collect()
        };
        SynthSpec {
            templates: vec![
                Template {
                    text: "the {A} could not hold the {B} because {P} was too {T}.".into(),
                    first_label: 2,
                },
                Template {
                    text: "the {A} did not fit into the {B} because {P} was too {T}.".into(),
                    first_label: 1,
                },
            ],
            objects: split(
                "trophy/suitcase, ball/bag, book/shelf, cake/box, chair/van, lamp/crate, piano/truck, \
                 table/room, laptop/case, bottle/fridge, sofa/doorway, guitar/locker, bike/shed, \
                 statue/cart, mattress/car, plant/pot, painting/frame, coat/closet, drum/trunk, kettle/cupboard",
            ),
            triggers: split("big/small, large/tiny, huge/little, wide/narrow, tall/short"),
            pronoun: "it".into(),
            pairs: None,
        }
    }
}

impl SynthSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SynthSpec {
            templates: Vec::new(),
            objects: Vec::new(),
            triggers: Vec::new(),
            pronoun: "it".into(),
            pairs: None,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Config(format!("synthetic spec line {}: {detail}", i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let value = value.trim();
            match key.trim() {
                "template" => {
                    let (body, label) = value
                        .rsplit_once('|')
                        .ok_or_else(|| err("template needs `| first-label`".into()))?;
                    let first_label = match label.trim() {
                        "1" => 1,
                        "2" => 2,
                        other => return Err(err(format!("first-label {other:?} is not 1 or 2"))),
                    };
                    spec.templates.push(Template {
                        text: body.trim().to_string(),
                        first_label,
                    });
                }
                "objects" => spec.objects.extend(slash_pairs(value).map_err(err)?),
                "triggers" => spec.triggers.extend(slash_pairs(value).map_err(err)?),
                "pronoun" => spec.pronoun = value.to_string(),
                "pairs" => spec.pairs = Some(value.parse().map_err(|_| err(format!("pairs {value:?} is not a count")))?),
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() || self.objects.is_empty() || self.triggers.is_empty() {
            return Err(Error::Config("synthetic spec needs templates, objects and triggers".into()));
        }
        for t in &self.templates {
            let slots = slots_of(&t.text)?;
            if let Some(bad) = slots.iter().find(|s| !SLOTS.contains(&s.as_str())) {
                return Err(Error::Config(format!("template {:?} references unknown slot {{{bad}}}", t.text)));
            }
            for need in SLOTS {
                if slots.iter().filter(|s| *s == need).count() != 1 {
                    return Err(Error::Config(format!("template {:?} must use {{{need}}} exactly once", t.text)));
                }
            }
        }
        for (x, y) in self.objects.iter().chain(&self.triggers) {
            if x.trim().is_empty() || y.trim().is_empty() || x == y {
                return Err(Error::Config(format!("lexicon pair {x:?}/{y:?} must hold two distinct entries")));
            }
        }
        Ok(())
    }
}

fn slash_pairs(value: &str) -> std::result::Result<Vec<(String, String)>, String> {
    value
        .split(',')
        .map(|p| {
            p.trim()
                .split_once('/')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| format!("lexicon entry {p:?} is not of the form x/y"))
        })
        .collect()
}

fn slots_of(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("unclosed slot in template {text:?}")))?;
        out.push(rest[open + 1..open + close].to_string());
        rest = &rest[open + close + 1..];
    }
    Ok(out)
}

fn instantiate(template: &str, a: &str, b: &str, pronoun: &str, trigger: &str) -> (String, std::ops::Range<usize>) {
    let mut out = String::new();
    let mut span = 0..0;
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').unwrap();
        let fill = match &rest[open + 1..close] {
            "A" => a,
            "B" => b,
            "T" => trigger,
            _ => {
                span = out.len()..out.len() + pronoun.len();
                pronoun
            }
        };
        out.push_str(fill);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    (out, span)
}

/// Every (object pair, trigger pair, template) combination in a seeded
/// order, truncated to `spec.pairs` when set.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut combos = Vec::new();
    for o in 0..spec.objects.len() {
        for t in 0..spec.triggers.len() {
            for m in 0..spec.templates.len() {
                combos.push((o, t, m));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    combos.shuffle(&mut rng);
    combos.truncate(spec.pairs.unwrap_or(usize::MAX));

    let mut corpus = Corpus::new("synthetic");
    for (n, &(o, t, m)) in combos.iter().enumerate() {
        let (a, b) = &spec.objects[o];
        let (x, y) = &spec.triggers[t];
        let template = &spec.templates[m];
        let id = format!("synth-{n}");
        let member = |trigger: &str, gold: u8| -> Result<WinogradSchema> {
            let (text, span) = instantiate(&template.text, a, b, &spec.pronoun, trigger);
            if find_word(&text, &spec.pronoun, &(0..0)) != Some(span.clone()) {
                return Err(Error::Config(format!("pronoun {:?} occurs before its slot in {text:?}", spec.pronoun)));
            }
            WinogradSchema::new(text, span, a.as_str(), b.as_str(), Some(gold), id.clone())
                .map_err(|e| Error::Config(e.to_string()))
        };
        let first = member(x, template.first_label)?;
        let second = member(y, 3 - template.first_label)?;
        let pair = if rng.gen_bool(0.5) {
            TwinPair::new(second, first)
        } else {
            TwinPair::new(first, second)
        };
        corpus.pairs.push(pair.map_err(|e| Error::Config(e.to_string()))?);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_template_flips_gold() {
        let spec = SynthSpec::parse(
            "template = the {A} could not hold the {B} because {P} was too {T} | 2\n\
             objects = trophy/suitcase\ntriggers = big/small\n",
        )
        .unwrap();
        let corpus = generate_synthetic(&spec, 0).unwrap();
        assert_eq!(corpus.pairs.len(), 1);
        let p = &corpus.pairs[0];
        let big = p.members().into_iter().find(|s| s.text.ends_with("big")).unwrap();
        assert_eq!(big.gold, Some(2));
        assert_ne!(p.first.gold, p.second.gold);
    }

    #[test]
    fn unknown_slot_is_config_error() {
        let spec = "template = the {A} and {B} and {P} and {T} and {X} | 1\nobjects = a1/b1\ntriggers = x/y\n";
        let err = SynthSpec::parse(spec).unwrap_err();
        assert!(matches!(err, Error::Config(_)) && err.to_string().contains("{X}"));
        assert!(SynthSpec::parse("objects = a\n").is_err());
        assert!(SynthSpec::parse("colour = red\n").unwrap_err().to_string().contains("line 1"));
    }

    #[test]
    fn default_lexicon_yields_200_pairs_deterministically() {
        let spec = SynthSpec::default();
        let a = generate_synthetic(&spec, 7).unwrap();
        assert_eq!(a.pairs.len(), 200);
        assert_eq!(a, generate_synthetic(&spec, 7).unwrap());
        assert_ne!(a, generate_synthetic(&spec, 8).unwrap());
    }
}
