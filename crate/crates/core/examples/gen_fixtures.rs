//! Regenerates the synthetic fixtures under `fixtures/`.
//!
//! ```text
//! cargo run -p coltype-core --example gen_fixtures -- fixtures
//! ```

use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use coltype_core::corpus::{table_to_csv, write_labeled_corpus, AnnotatedTable};
use coltype_core::synth::{self, Kind, BACKGROUND_KINDS, GLOBAL_KINDS};
use coltype_core::table::{Column, Table};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels outside the fixture ontology become `unknown`.
fn relabel(mut tables: Vec<AnnotatedTable>) -> Vec<AnnotatedTable> {
    let known: Vec<&str> = GLOBAL_KINDS.iter().map(|k| k.type_id()).collect();
    for t in &mut tables {
        for label in t.labels.values_mut() {
            if !known.contains(&label.as_str()) {
                *label = "unknown".into();
            }
        }
    }
    tables
}

fn main() -> anyhow::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    let write = |rel: &str, text: &str| -> anyhow::Result<()> {
        let path = root.join(rel);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        fs::write(&path, text).with_context(|| path.display().to_string())
    };

    write("embeddings.txt", &synth::synthetic_embeddings(16, 5))?;
    for kind in [Kind::City, Kind::Country] {
        let words: String = synth::vocabulary(kind).iter().map(|w| format!("{w}\n")).collect();
        write(&format!("rules/{}.dict", kind.type_id()), &format!("# {} names\n{words}", kind.type_id()))?;
    }
    write("rules/extra.tsv", "# rule_id\ttype_id\tpattern\nyear_4digit\tyear\t^(19|20)\\d{2}$\n")?;

    write_labeled_corpus(&root.join("corpus/train"), &synth::training_corpus(2, 80))?;
    write_labeled_corpus(&root.join("corpus/source"), &synth::source_corpus(3, 40))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pool: Vec<Kind> = GLOBAL_KINDS.iter().chain(&BACKGROUND_KINDS).copied().collect();
    let eval = (0..10).map(|i| synth::random_table(&format!("eval-{i:02}"), &pool, &mut rng)).collect();
    write_labeled_corpus(&root.join("corpus/eval"), &relabel(eval))?;

    // Five columns, each header an exact ontology name or synonym.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cols = [(Kind::City, "City"), (Kind::Email, "E-Mail"), (Kind::Year, "yr"), (Kind::Company, "company"), (Kind::Age, "Age")];
    let columns: Vec<Column> = cols.iter().map(|&(k, h)| synth::column_with_header(k, h, 12, &mut rng)).collect();
    write("tables/exact_headers.csv", &table_to_csv(&Table::new("exact", "exact", columns)?))?;

    // The correction scenario: an `Income` column of salaries.
    let columns = vec![
        synth::column_with_header(Kind::Name, "Employee", 30, &mut rng),
        synth::column_with_header(Kind::Salary, "Income", 30, &mut rng),
        synth::column_with_header(Kind::City, "Office", 30, &mut rng),
    ];
    write("tables/income.csv", &table_to_csv(&Table::new("income", "income", columns)?))?;
    Ok(())
}
