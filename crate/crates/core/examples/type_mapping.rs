// How host-language types land on the seven shared field types.

use uniheap::types::{map_js_number, type_table};
use uniheap::{map_foreign_type, Language, UniType};

pub fn run_example() -> uniheap::Result<()> {
    for lang in [Language::Java, Language::Python, Language::JavaScript] {
        let cells: Vec<String> = type_table(lang).iter().map(|(n, t)| format!("{n}->{t}")).collect();
        println!("{:<10} {}", lang.name(), cells.join(", "));
    }
    println!("java long      => {}", map_foreign_type(Language::Java, "long")?);
    println!("js num as int  => {}", map_js_number(Some(UniType::Int))?);
    match map_foreign_type(Language::Python, "short") {
        Err(e) => println!("python short   => {e}"),
        Ok(t) => println!("python short   => {t}"),
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> uniheap::Result<()> {
    run_example()
}
