//! Seeded synthetic corpus in the style of the GMB NER data: lower-case
//! entity types (`geo`, `gpe`, `per`, `org`, `tim`) in BIO form, Penn POS
//! tags, and some names whose type depends on context. Used for smoke tests
//! and benchmarks where the real dataset is unavailable.

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::corpus::{Sentence, Token};
use crate::numgrad::seeded_rng;

type Entity = &'static [(&'static str, &'static str)];

const PER: &[Entity] = &[
    &[("Alice", "NNP"), ("Moreau", "NNP")],
    &[("Bashir", "NNP")],
    &[("Chen", "NNP"), ("Wei", "NNP")],
    &[("Dmitri", "NNP"), ("Volkov", "NNP")],
    &[("Ellen", "NNP"), ("Park", "NNP")],
    &[("Jordan", "NNP")],
    &[("President", "NNP"), ("Mbeki", "NNP")],
    &[("Minister", "NNP"), ("Sato", "NNP")],
];
const GEO: &[Entity] = &[
    &[("Paris", "NNP")],
    &[("Baghdad", "NNP")],
    &[("Nairobi", "NNP")],
    &[("Jordan", "NNP")],
    &[("New", "NNP"), ("York", "NNP")],
    &[("South", "NNP"), ("Africa", "NNP")],
    &[("Europe", "NNP")],
    &[("Gaza", "NNP")],
];
const GPE: &[Entity] = &[
    &[("French", "JJ")],
    &[("Iraqi", "JJ")],
    &[("Kenyan", "JJ")],
    &[("American", "JJ")],
    &[("Chinese", "JJ")],
    &[("Palestinian", "JJ")],
];
const ORG: &[Entity] = &[
    &[("Reuters", "NNP")],
    &[("WHO", "NNP")],
    &[("United", "NNP"), ("Nations", "NNP")],
    &[("European", "NNP"), ("Union", "NNP")],
    &[("Hamas", "NNP")],
    &[("Central", "NNP"), ("Bank", "NNP")],
];
const TIM: &[Entity] = &[
    &[("Monday", "NNP")],
    &[("Saturday", "NNP")],
    &[("2005", "CD")],
    &[("last", "JJ"), ("week", "NN")],
    &[("March", "NNP"), ("12", "CD")],
    &[("Friday", "NNP")],
];

enum Slot {
    W(&'static str, &'static str),
    E(&'static str, &'static [Entity]),
}
use Slot::{E, W};

const TEMPLATES: &[&[Slot]] = &[
    &[
        E("per", PER),
        W("visited", "VBD"),
        E("geo", GEO),
        W("on", "IN"),
        E("tim", TIM),
        W(".", "."),
    ],
    &[
        E("org", ORG),
        W("officials", "NNS"),
        W("in", "IN"),
        E("geo", GEO),
        W("said", "VBD"),
        E("gpe", GPE),
        W("troops", "NNS"),
        W("arrived", "VBD"),
        W(".", "."),
    ],
    &[
        W("The", "DT"),
        E("gpe", GPE),
        W("government", "NN"),
        W("met", "VBD"),
        E("per", PER),
        W("in", "IN"),
        E("geo", GEO),
        W(".", "."),
    ],
    &[
        E("per", PER),
        W("told", "VBD"),
        E("org", ORG),
        W("that", "IN"),
        W("talks", "NNS"),
        W("will", "MD"),
        W("resume", "VB"),
        E("tim", TIM),
        W(".", "."),
    ],
    &[
        W("Protesters", "NNS"),
        W("gathered", "VBD"),
        W("in", "IN"),
        E("geo", GEO),
        W("on", "IN"),
        E("tim", TIM),
        W(",", ","),
        W("police", "NNS"),
        W("said", "VBD"),
        W(".", "."),
    ],
    &[
        E("org", ORG),
        W("says", "VBZ"),
        E("gpe", GPE),
        W("exports", "NNS"),
        W("rose", "VBD"),
        W("in", "IN"),
        E("tim", TIM),
        W(".", "."),
    ],
    &[
        W("Officials", "NNS"),
        W("say", "VBP"),
        E("per", PER),
        W("will", "MD"),
        W("travel", "VB"),
        W("to", "TO"),
        E("geo", GEO),
        W(".", "."),
    ],
    &[
        W("A", "DT"),
        W("spokesman", "NN"),
        W("for", "IN"),
        E("org", ORG),
        W("declined", "VBD"),
        W("to", "TO"),
        W("comment", "VB"),
        W(".", "."),
    ],
];

/// `n` sentences drawn from fixed templates.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Sentence> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|id| {
            let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
            let mut tokens = Vec::new();
            for slot in template {
                match slot {
                    W(w, p) => tokens.push(Token::new(*w, *p, "O")),
                    E(kind, pool) => {
                        let entity = pool.choose(&mut rng).expect("non-empty pool");
                        for (k, (w, p)) in entity.iter().enumerate() {
                            let prefix = if k == 0 { "B" } else { "I" };
                            tokens.push(Token::new(*w, *p, format!("{prefix}-{kind}")));
                        }
                    }
                }
            }
            Sentence::new(id, tokens)
        })
        .collect()
}

/// GMB-style CSV: `Sentence #,Word,POS,Tag` with the marker on each
/// sentence's first row only.
pub fn to_gmb_csv(sentences: &[Sentence]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["Sentence #", "Word", "POS", "Tag"]).expect("in-memory write");
    for (i, s) in sentences.iter().enumerate() {
        for (k, t) in s.tokens.iter().enumerate() {
            let marker = if k == 0 {
                format!("Sentence: {}", i + 1)
            } else {
                String::new()
            };
            w.write_record([marker.as_str(), &t.word, &t.pos, &t.ner])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}
