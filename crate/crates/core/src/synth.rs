//! Seeded synthetic tables for fixtures, demos and scenario tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::AnnotatedTable;
use crate::table::{Column, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    Date,
    Email,
    City,
    Country,
    Age,
    Price,
    Name,
    Phone,
    Url,
    Zip,
    Year,
    Company,
    Salary,
    Uuid,
    HexColor,
    ProductCode,
    Sentence,
    Measurement,
    Percent,
    TimeOfDay,
    Version,
}

/// Kinds covered by the fixture ontology.
pub const GLOBAL_KINDS: [Kind; 12] = [
    Kind::Date,
    Kind::Email,
    Kind::City,
    Kind::Country,
    Kind::Age,
    Kind::Price,
    Kind::Name,
    Kind::Phone,
    Kind::Url,
    Kind::Zip,
    Kind::Year,
    Kind::Company,
];

/// Kinds outside the fixture ontology that appear in training corpora
/// (they become background `unknown` examples).
pub const BACKGROUND_KINDS: [Kind; 6] =
    [Kind::ProductCode, Kind::Sentence, Kind::Measurement, Kind::Percent, Kind::TimeOfDay, Kind::Version];

const FIRST: &[&str] = &[
    "james", "mary", "robert", "patricia", "john", "jennifer", "michael", "linda", "david", "elizabeth", "william",
    "barbara", "richard", "susan", "joseph", "jessica", "thomas", "sarah", "carlos", "maria", "ahmed", "fatima",
    "wei", "mei", "hiroshi", "yuki", "olga", "ivan", "amara", "kwame", "priya", "arjun", "lucia", "mateo", "noah",
    "emma", "liam", "olivia", "sofia", "lars",
];
const LAST: &[&str] = &[
    "smith", "johnson", "williams", "brown", "jones", "garcia", "miller", "davis", "rodriguez", "martinez", "hernandez",
    "lopez", "gonzalez", "wilson", "anderson", "taylor", "moore", "jackson", "martin", "lee", "chen", "wang",
    "tanaka", "sato", "kowalski", "novak", "okafor", "mensah", "patel", "singh", "rossi", "silva", "muller",
    "schmidt", "dubois", "larsen", "ivanova", "kim", "park", "nguyen",
];
const CITIES: &[&str] = &[
    "paris", "london", "berlin", "madrid", "rome", "vienna", "prague", "warsaw", "lisbon", "dublin", "amsterdam",
    "brussels", "oslo", "stockholm", "helsinki", "copenhagen", "athens", "budapest", "zurich", "geneva", "tokyo",
    "osaka", "seoul", "beijing", "shanghai", "mumbai", "delhi", "cairo", "lagos", "nairobi", "toronto", "chicago",
    "boston", "seattle", "denver", "austin", "lima", "bogota", "santiago", "sydney",
];
const COUNTRIES: &[&str] = &[
    "france", "germany", "spain", "italy", "austria", "poland", "portugal", "ireland", "netherlands", "belgium",
    "norway", "sweden", "finland", "denmark", "greece", "hungary", "switzerland", "japan", "korea", "china", "india",
    "egypt", "nigeria", "kenya", "canada", "mexico", "brazil", "peru", "colombia", "chile", "argentina", "australia",
    "morocco", "turkey", "vietnam", "thailand", "indonesia", "iceland", "estonia", "latvia",
];
const COMPANY_HEAD: &[&str] = &[
    "acme", "globex", "initech", "umbrella", "stark", "wayne", "cyberdyne", "hooli", "vandelay", "soylent", "tyrell",
    "wonka", "gringotts", "oscorp", "aperture", "monarch", "nakatomi", "massive", "dynamic", "blue", "northwind",
    "contoso", "fabrikam", "litware", "proseware",
];
const COMPANY_TAIL: &[&str] = &["inc", "corp", "llc", "group", "labs", "systems", "holdings", "industries", "partners", "gmbh"];
const WORDS: &[&str] = &[
    "the", "quick", "report", "was", "delayed", "because", "of", "weather", "please", "review", "attached", "notes",
    "before", "meeting", "customer", "asked", "about", "shipping", "schedule", "and", "pricing", "team", "will",
    "follow", "up", "next", "week", "with", "details", "item", "arrived", "damaged", "replacement", "requested",
    "order", "looks", "fine", "needs", "approval", "from", "manager", "call", "back", "tomorrow", "morning",
];
const DOMAINS: &[&str] = &["example", "mail", "corp", "inbox", "post", "web", "net", "online"];
const TLDS: &[&str] = &["com", "org", "net", "io", "de", "fr", "co"];
const UNITS: &[&str] = &["kg", "g", "cm", "mm", "m", "lb", "oz", "in"];

impl Kind {
    pub fn type_id(self) -> &'static str {
        match self {
            Kind::Date => "date",
            Kind::Email => "email",
            Kind::City => "city",
            Kind::Country => "country",
            Kind::Age => "age",
            Kind::Price => "price",
            Kind::Name => "name",
            Kind::Phone => "phone_number",
            Kind::Url => "url",
            Kind::Zip => "zip_code",
            Kind::Year => "year",
            Kind::Company => "company",
            Kind::Salary => "salary",
            Kind::Uuid => "uuid",
            Kind::HexColor => "hex_color",
            Kind::ProductCode => "product_code",
            Kind::Sentence => "sentence",
            Kind::Measurement => "measurement",
            Kind::Percent => "percentage",
            Kind::TimeOfDay => "time_of_day",
            Kind::Version => "version",
        }
    }

    pub fn headers(self) -> &'static [&'static str] {
        match self {
            Kind::Date => &["date", "created", "day", "signup date", "order date", "when"],
            Kind::Email => &["email", "e-mail", "contact", "mail address", "email_address"],
            Kind::City => &["city", "town", "municipality", "city name", "hometown"],
            Kind::Country => &["country", "nation", "country_name", "origin"],
            Kind::Age => &["age", "age_years", "years old", "patient age"],
            Kind::Price => &["price", "cost", "unit price", "amount", "fee"],
            Kind::Name => &["name", "full name", "person", "customer", "employee", "who"],
            Kind::Phone => &["phone", "telephone", "phone number", "mobile"],
            Kind::Url => &["url", "website", "homepage", "link"],
            Kind::Zip => &["zip", "postal code", "zipcode", "postcode"],
            Kind::Year => &["year", "yr", "founded", "model year"],
            Kind::Company => &["company", "employer", "organization", "firm"],
            Kind::Salary => &["salary", "income", "annual pay", "wage", "compensation", "earnings"],
            Kind::Uuid => &["id", "guid", "uuid", "record id", "key"],
            Kind::HexColor => &["color", "colour", "hex", "shade"],
            Kind::ProductCode => &["sku", "code", "item code", "part number"],
            Kind::Sentence => &["notes", "comment", "description", "remarks"],
            Kind::Measurement => &["weight", "size", "dimension", "length"],
            Kind::Percent => &["rate", "share", "pct", "growth"],
            Kind::TimeOfDay => &["time", "start time", "hour", "opens"],
            Kind::Version => &["version", "release", "build"],
        }
    }

    /// One random value of this kind.
    pub fn value(self, rng: &mut impl Rng) -> String {
        let pick = |rng: &mut dyn rand::RngCore, xs: &[&str]| xs[rng.random_range(0..xs.len())].to_string();
        let cap = |s: &str| {
            let mut c = s.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
        };
        match self {
            Kind::Date => {
                let (y, m, d) = (rng.random_range(1990..=2024), rng.random_range(1..=12), rng.random_range(1..=28));
                if rng.random_bool(0.8) {
                    format!("{y:04}-{m:02}-{d:02}")
                } else {
                    format!("{m:02}/{d:02}/{y:04}")
                }
            }
            Kind::Email => format!(
                "{}.{}@{}.{}",
                pick(rng, FIRST),
                pick(rng, LAST),
                pick(rng, DOMAINS),
                pick(rng, TLDS)
            ),
            Kind::City => cap(&pick(rng, CITIES)),
            Kind::Country => cap(&pick(rng, COUNTRIES)),
            Kind::Age => rng.random_range(18..=90).to_string(),
            Kind::Price => format!("{}.{:02}", rng.random_range(1..=499), rng.random_range(0..100)),
            Kind::Name => format!("{} {}", cap(&pick(rng, FIRST)), cap(&pick(rng, LAST))),
            Kind::Phone => format!(
                "({:03}) {:03}-{:04}",
                rng.random_range(201..=989),
                rng.random_range(200..=999),
                rng.random_range(0..10000)
            ),
            Kind::Url => format!("https://www.{}{}.{}", pick(rng, COMPANY_HEAD), pick(rng, DOMAINS), pick(rng, TLDS)),
            Kind::Zip => format!("{:05}", rng.random_range(501..=99950)),
            Kind::Year => rng.random_range(1950..=2024).to_string(),
            Kind::Company => format!("{} {}", cap(&pick(rng, COMPANY_HEAD)), cap(&pick(rng, COMPANY_TAIL))),
            Kind::Salary => (rng.random_range(40..=160) * 1000 + rng.random_range(0..10) * 100).to_string(),
            Kind::Uuid => {
                let mut s = String::new();
                for (i, len) in [8, 4, 4, 4, 12].into_iter().enumerate() {
                    if i > 0 {
                        s.push('-');
                    }
                    for _ in 0..len {
                        let _ = write!(s, "{:x}", rng.random_range(0..16u8));
                    }
                }
                s
            }
            Kind::HexColor => format!("#{:06x}", rng.random_range(0..0x0100_0000u32)),
            Kind::ProductCode => format!(
                "{}{}-{:04}",
                (b'A' + rng.random_range(0..26u8)) as char,
                (b'A' + rng.random_range(0..26u8)) as char,
                rng.random_range(0..10000)
            ),
            Kind::Sentence => {
                let n = rng.random_range(4..=9);
                (0..n).map(|_| pick(rng, WORDS)).collect::<Vec<_>>().join(" ")
            }
            Kind::Measurement => format!("{}.{} {}", rng.random_range(1..=200), rng.random_range(0..10), pick(rng, UNITS)),
            Kind::Percent => format!("{}.{}%", rng.random_range(0..=100), rng.random_range(0..10)),
            Kind::TimeOfDay => format!("{:02}:{:02}", rng.random_range(0..24), rng.random_range(0..60)),
            Kind::Version => format!(
                "{}.{}.{}",
                rng.random_range(0..10),
                rng.random_range(0..20),
                rng.random_range(0..50)
            ),
        }
    }
}

/// The closed vocabulary behind a kind's values, if it has one.
pub fn vocabulary(kind: Kind) -> &'static [&'static str] {
    match kind {
        Kind::City => CITIES,
        Kind::Country => COUNTRIES,
        _ => &[],
    }
}

/// A column of `rows` values with about 3% missing cells.
pub fn column_with_header(kind: Kind, header: &str, rows: usize, rng: &mut impl Rng) -> Column {
    let values = (0..rows).map(|_| if rng.random_bool(0.03) { String::new() } else { kind.value(rng) }).collect();
    Column::new(header, values)
}

pub fn column(kind: Kind, rows: usize, rng: &mut impl Rng) -> Column {
    let header = *kind.headers().choose(rng).expect("non-empty header list");
    column_with_header(kind, header, rows, rng)
}

/// A table with one column per kind, all annotated.
pub fn table(id: &str, kinds: &[Kind], rows: usize, rng: &mut impl Rng) -> AnnotatedTable {
    let columns: Vec<Column> = kinds.iter().map(|&k| column(k, rows, rng)).collect();
    let labels: BTreeMap<usize, String> = kinds.iter().enumerate().map(|(i, k)| (i, k.type_id().to_string())).collect();
    AnnotatedTable::new(Table::new(id, id, columns).expect("equal column lengths"), labels)
}

/// A table of 2 to 5 distinct kinds drawn from `pool`.
pub fn random_table(id: &str, pool: &[Kind], rng: &mut impl Rng) -> AnnotatedTable {
    let n = rng.random_range(2..=5).min(pool.len());
    let kinds: Vec<Kind> = pool.choose_multiple(rng, n).copied().collect();
    let rows = rng.random_range(20..=60);
    table(id, &kinds, rows, rng)
}

/// Global training corpus: fixture-ontology kinds mixed with background
/// kinds. Contains no salary columns.
pub fn training_corpus(seed: u64, n_tables: usize) -> Vec<AnnotatedTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Kind> = GLOBAL_KINDS.iter().chain(&BACKGROUND_KINDS).copied().collect();
    (0..n_tables).map(|i| random_table(&format!("train-{i:03}"), &pool, &mut rng)).collect()
}

/// DPBD source corpus: half the tables place a salary column right of a
/// name column; the rest hold other fixture kinds.
pub fn source_corpus(seed: u64, n_tables: usize) -> Vec<AnnotatedTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_tables)
        .map(|i| {
            let id = format!("source-{i:03}");
            if i % 2 == 0 {
                salary_table(&id, &mut rng)
            } else {
                random_table(&id, &GLOBAL_KINDS, &mut rng)
            }
        })
        .collect()
}

/// `name, salary, <one or two other kinds>`.
pub fn salary_table(id: &str, rng: &mut impl Rng) -> AnnotatedTable {
    let extra = [Kind::City, Kind::Company, Kind::Email, Kind::Date, Kind::Age];
    let mut kinds = vec![Kind::Name, Kind::Salary];
    let n_extra = rng.random_range(1..=2);
    kinds.extend(extra.choose_multiple(rng, n_extra).copied());
    let rows = rng.random_range(20..=60);
    table(id, &kinds, rows, rng)
}

fn push_vector(out: &mut String, word: &str, v: &[f64]) {
    out.push_str(word);
    for x in v {
        let _ = write!(out, " {x:.6}");
    }
    out.push('\n');
}

/// A small embedding file in which related words share a cluster. Money
/// words are split into a compensation and a price cluster.
pub fn synthetic_embeddings(dim: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let header_words = |kinds: &[Kind]| -> Vec<String> {
        kinds.iter().flat_map(|k| k.headers().iter().flat_map(|h| crate::ontology::name_tokens(h))).collect()
    };
    let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let clusters: Vec<Vec<String>> = vec![
        [own(CITIES), header_words(&[Kind::City])].concat(),
        [own(COUNTRIES), header_words(&[Kind::Country])].concat(),
        [own(FIRST), own(LAST), header_words(&[Kind::Name]), own(&["full"])].concat(),
        [own(COMPANY_HEAD), own(COMPANY_TAIL), header_words(&[Kind::Company])].concat(),
        [header_words(&[Kind::Salary]), own(&["pay", "salaries"])].concat(),
        header_words(&[Kind::Price]),
        header_words(&[Kind::Date, Kind::Year, Kind::TimeOfDay]),
        header_words(&[Kind::Email, Kind::Phone]),
        header_words(&[Kind::Url]),
        own(WORDS),
    ];
    let mut seen = std::collections::BTreeSet::new();
    let mut out = String::new();
    for cluster in clusters {
        let centroid: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for w in cluster {
            if !seen.insert(w.clone()) {
                continue;
            }
            let v: Vec<f64> = centroid.iter().map(|c| c + 0.25 * rng.random_range(-1.0..1.0)).collect();
            push_vector(&mut out, &w, &v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{infer_primitive, Primitive};

    #[test]
    fn generation_is_seeded() {
        assert_eq!(training_corpus(3, 4), training_corpus(3, 4));
        assert_ne!(training_corpus(3, 4), training_corpus(4, 4));
        assert!(training_corpus(3, 30).iter().all(|t| t.labels.values().all(|l| l != "salary")));
    }

    #[test]
    fn values_have_expected_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, p) in [
            (Kind::Salary, Primitive::Numeric),
            (Kind::Age, Primitive::Numeric),
            (Kind::Date, Primitive::Date),
            (Kind::City, Primitive::Text),
            (Kind::Uuid, Primitive::Text),
        ] {
            let values: Vec<String> = (0..50).map(|_| k.value(&mut rng)).collect();
            assert_eq!(infer_primitive(&values), p, "{k:?}");
        }
    }

    #[test]
    fn salary_tables_put_salary_right_of_name() {
        for t in source_corpus(5, 6).iter().step_by(2) {
            assert_eq!(t.label(0), Some("name"));
            assert_eq!(t.label(1), Some("salary"));
        }
    }

    #[test]
    fn embeddings_parse() {
        let store = crate::header::load_embeddings(synthetic_embeddings(8, 1).as_bytes()).unwrap();
        assert_eq!(store.dimension(), 8);
        assert!(store.get("salary").is_some() && store.get("paris").is_some());
    }
}
