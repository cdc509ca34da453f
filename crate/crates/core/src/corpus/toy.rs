//! Template-generated Czech/English parallel sentences.
//!
//! Each pair is built from one shared random derivation rendered in both
//! languages, so the two sides carry the same content with different surface
//! forms. Used for smoke runs and the end-to-end tests; real experiments
//! should pass an actual parallel corpus.

use super::ParallelPair;
use crate::tensor::Rng;

// (czech, english)
const SUBJECTS: &[(&str, &str)] = &[
    ("učitel", "the teacher"),
    ("lékařka", "the doctor"),
    ("můj soused", "my neighbour"),
    ("starý rybář", "the old fisherman"),
    ("naše vláda", "our government"),
    ("malé dítě", "the small child"),
    ("ředitel školy", "the headmaster"),
    ("mladá studentka", "the young student"),
    ("celá rodina", "the whole family"),
    ("místní zemědělec", "the local farmer"),
    ("každý řidič", "every driver"),
    ("komise", "the commission"),
    ("Europol", "Europol"),
    ("policie", "the police"),
    ("tato společnost", "this company"),
    ("můj bratr", "my brother"),
];

const VERBS: &[(&str, &str)] = &[
    ("zpracovává", "processes"),
    ("předává", "transfers"),
    ("hledá", "is looking for"),
    ("opravuje", "repairs"),
    ("prodává", "sells"),
    ("kupuje", "buys"),
    ("čte", "reads"),
    ("píše", "writes"),
    ("kontroluje", "checks"),
    ("připravuje", "prepares"),
    ("přináší", "brings"),
    ("sleduje", "watches"),
    ("ukazuje", "shows"),
    ("potřebuje", "needs"),
];

const OBJECTS: &[(&str, &str)] = &[
    ("údaje", "the data"),
    ("starou knihu", "the old book"),
    ("nové auto", "the new car"),
    ("dopis", "the letter"),
    ("zprávu o počasí", "the weather report"),
    ("čerstvý chléb", "fresh bread"),
    ("důležité dokumenty", "important documents"),
    ("rozbitou židli", "the broken chair"),
    ("jízdní řád", "the timetable"),
    ("levné jablko", "a cheap apple"),
    ("krásný obraz", "a beautiful painting"),
    ("tajný plán", "the secret plan"),
    ("zelený kabát", "the green coat"),
    ("výsledky voleb", "the election results"),
];

const PLACES: &[(&str, &str)] = &[
    ("v kuchyni", "in the kitchen"),
    ("na nádraží", "at the station"),
    ("ve městě", "in the city"),
    ("u řeky", "by the river"),
    ("v knihovně", "in the library"),
    ("na zahradě", "in the garden"),
    ("v nemocnici", "in the hospital"),
    ("za domem", "behind the house"),
    ("v kanceláři", "in the office"),
    ("na trhu", "at the market"),
];

const TIMES: &[(&str, &str)] = &[
    ("každé ráno", "every morning"),
    ("včera večer", "last night"),
    ("v pondělí", "on Monday"),
    ("po obědě", "after lunch"),
    ("celý den", "all day"),
    ("často", "often"),
    ("dnes", "today"),
    ("znovu", "again"),
];

const MANNERS: &[(&str, &str)] = &[
    ("pomalu", "slowly"),
    ("pečlivě", "carefully"),
    ("rychle", "quickly"),
    ("velmi tiše", "very quietly"),
    ("bez problémů", "without problems"),
    ("s radostí", "with joy"),
];

const CONJUNCTIONS: &[(&str, &str)] = &[
    ("a", "and"),
    ("ale", "but"),
    ("protože", "because"),
    ("zatímco", "while"),
    ("když", "when"),
];

fn pick<'a>(rng: &mut Rng, table: &'a [(&'a str, &'a str)]) -> (&'a str, &'a str) {
    table[rng.below(table.len())]
}

fn clause(rng: &mut Rng, cs: &mut Vec<String>, en: &mut Vec<String>) {
    let (s_cs, s_en) = pick(rng, SUBJECTS);
    let (v_cs, v_en) = pick(rng, VERBS);
    let (o_cs, o_en) = pick(rng, OBJECTS);
    cs.push(s_cs.into());
    en.push(s_en.into());
    // Czech adverbs of manner usually precede the verb, English ones follow the object.
    let manner = (rng.uniform() < 0.4).then(|| pick(rng, MANNERS));
    if let Some((m_cs, _)) = manner {
        cs.push(m_cs.into());
    }
    cs.push(v_cs.into());
    en.push(v_en.into());
    cs.push(o_cs.into());
    en.push(o_en.into());
    if let Some((_, m_en)) = manner {
        en.push(m_en.into());
    }
    if rng.uniform() < 0.6 {
        let (p_cs, p_en) = pick(rng, PLACES);
        cs.push(p_cs.into());
        en.push(p_en.into());
    }
    if rng.uniform() < 0.5 {
        let (t_cs, t_en) = pick(rng, TIMES);
        cs.push(t_cs.into());
        en.push(t_en.into());
    }
}

fn capitalise(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Generates `n` pairs; language A is Czech, language B is English.
pub fn generate(n: usize, seed: u64) -> Vec<ParallelPair> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let (mut cs, mut en) = (Vec::new(), Vec::new());
            clause(&mut rng, &mut cs, &mut en);
            let extra = if rng.uniform() < 0.7 { 1 } else { 2 };
            for _ in 0..extra {
                let (c_cs, c_en) = pick(&mut rng, CONJUNCTIONS);
                cs.push(c_cs.into());
                en.push(c_en.into());
                clause(&mut rng, &mut cs, &mut en);
            }
            ParallelPair {
                lang_a_text: capitalise(&cs.join(" ")) + ".",
                lang_b_text: capitalise(&en.join(" ")) + ".",
                pair_id: i as u64,
            }
        })
        .collect()
}

pub fn to_tsv(pairs: &[ParallelPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}\t{}\n", p.lang_a_text, p.lang_b_text))
        .collect()
}
