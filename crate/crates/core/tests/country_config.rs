use std::path::PathBuf;

use mforecast_core::persona::{render_prompt, CountryConfig, Persona, Scale};

fn germany() -> CountryConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/germany_2021.json");
    CountryConfig::load(&path).unwrap()
}

#[test]
fn german_config_has_ten_templates_and_expected_scales() {
    let c = germany();
    assert_eq!(c.select_templates(None).unwrap().len(), 10);
    let scales: Vec<(&str, Scale, usize)> = c
        .attributes
        .iter()
        .map(|a| (a.name.as_str(), a.scale, a.categories.len()))
        .collect();
    assert_eq!(
        scales,
        vec![
            ("age", Scale::Ordinal, 7),
            ("gender", Scale::Nominal, 2),
            ("education", Scale::Ordinal, 5),
            ("hhincome", Scale::Ordinal, 3),
            ("employment", Scale::Nominal, 3),
            ("political_orientation", Scale::Ordinal, 5),
            ("immigration", Scale::Ordinal, 3),
            ("inequality", Scale::Ordinal, 3),
        ]
    );
    assert_eq!(c.year_of_election.as_deref(), Some("2021"));
}

#[test]
fn every_german_template_renders_every_category() {
    let c = germany();
    let persona = Persona {
        id: 0,
        categories: vec![2, 1, 4, 0, 1, 3, 2, 0],
    };
    for t in &c.templates {
        let text = render_prompt(&c, &persona, t).unwrap();
        assert!(text.contains("30–39") && text.contains("2021"), "{text}");
        for (a, &g) in c.attributes.iter().zip(&persona.categories) {
            assert!(text.contains(&a.categories[g]), "template {} lost {}", t.id, a.name);
        }
    }
}
