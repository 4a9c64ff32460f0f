//! Chain-of-thought prompt templates for the four material families.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptFamily {
    Nanomaterial,
    SurfaceDefect,
    Corrosion,
    GeneralMaterial,
}

impl PromptFamily {
    pub const ALL: [PromptFamily; 4] = [
        PromptFamily::Nanomaterial,
        PromptFamily::SurfaceDefect,
        PromptFamily::Corrosion,
        PromptFamily::GeneralMaterial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptFamily::Nanomaterial => "nanomaterial",
            PromptFamily::SurfaceDefect => "surface-defect",
            PromptFamily::Corrosion => "corrosion",
            PromptFamily::GeneralMaterial => "general-material",
        }
    }

    fn entries(self) -> &'static [(&'static str, &'static str)] {
        match self {
            PromptFamily::Nanomaterial => NANOMATERIAL,
            PromptFamily::SurfaceDefect => SURFACE_DEFECT,
            PromptFamily::Corrosion => CORROSION,
            PromptFamily::GeneralMaterial => GENERAL_MATERIAL,
        }
    }
}

impl fmt::Display for PromptFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompt family '{s}'")))
    }
}

const NANOMATERIAL: &[(&str, &str)] = &[
    ("Introduction", "Provide an overview of the nanomaterial category and its significance across various fields."),
    ("Definition and Structure", "Define the nanomaterial category and describe its typical structure at the nanoscale."),
    ("Synthesis Methods", "Examine different methods employed for synthesizing or fabricating nanomaterials within this category. Discuss both their advantages and limitations."),
    ("Properties", "Highlight the unique physical, chemical, and electronic properties exhibited by nanomaterials in this category. Explain how these properties differ from those of bulk materials."),
    ("Surface Modification", "Describe strategies used to modify the surface properties of nanomaterials in this category, including techniques like functionalization, coating, or doping. Explain how these modifications enhance their performance or enable specific applications."),
    ("Applications", "Explore the extensive range of applications wherein nanomaterials from this category find use. Discuss their potential impact on fields such as electronics, energy, medicine, and more."),
];

const SURFACE_DEFECT: &[(&str, &str)] = &[
    ("Overview", "Briefly describe the specific material surface defect and its impact on material performance."),
    ("Characteristics", "Define the defect and its identifying features."),
    ("Formation", "Discuss the formation mechanisms of the defect."),
    ("Detection", "List the primary techniques for defect detection."),
    ("Effects", "Explain the defect's effects on material properties."),
    ("Mitigation", "Outline strategies to mitigate the defect."),
    ("Engineering", "Describe surface engineering techniques to control the defect."),
    ("Case Studies", "Provide examples where defect management improved material use."),
];

const CORROSION: &[(&str, &str)] = &[
    ("Corrosion Grading Overview", "Summarize the numerical corrosion grade system."),
    ("Grade Characteristics", "Detail key features of each corrosion grade."),
    ("Influencing Factors", "Discuss factors that influence corrosion grading."),
    ("Deterioration Mechanisms", "Describe deterioration mechanisms by grade."),
    ("Property Impact", "Examine corrosion's impact on metal properties."),
    ("Mitigation Strategies", "Outline preventive measures for each grade."),
    ("Grade Progression Analysis", "Analyze corrosion grade progression over time."),
    ("Rehabilitation Approaches", "Guide on repair or replace decisions by grade."),
    ("Corrosion Management Case Studies", "Present case studies on corrosion management."),
    ("Economic and Safety Considerations", "Discuss economic and safety implications."),
];

const GENERAL_MATERIAL: &[(&str, &str)] = &[
    ("Contextual Overview", "Introduce the material's origin, common use, and relevance."),
    ("Properties", "Discuss the material's physical and chemical characteristics."),
    ("Production", "Outline the processes of material preparation or manufacturing."),
    ("Structure", "Examine the material's structural features and their implications."),
    ("Modification", "Describe possible modifications to enhance the material's properties."),
    ("Longevity", "Analyze the material's durability, degradation, and environmental impact."),
    ("Applications", "Explore diverse applications and uses of the material."),
    ("Economic Impact", "Reflect on the material's economic significance and societal influence."),
    ("Safety", "Address health and safety considerations related to the material."),
    ("Future Outlook", "Speculate on potential future developments and research directions."),
];

/// One templated prompt (1-based index).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplatePrompt {
    pub index: usize,
    pub title: &'static str,
    pub body: &'static str,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub family: PromptFamily,
    pub prompts: Vec<TemplatePrompt>,
}

pub fn template(family: PromptFamily) -> PromptTemplate {
    PromptTemplate {
        family,
        prompts: family
            .entries()
            .iter()
            .enumerate()
            .map(|(i, (title, body))| TemplatePrompt {
                index: i + 1,
                title,
                body,
            })
            .collect(),
    }
}

/// A rendered prompt ready to send to a language model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub index: usize,
    pub title: String,
    pub text: String,
}

/// Renders the family's prompts with `subject` appended to each.
pub fn build_cot_prompts(family: &str, subject: &str) -> Result<Vec<Prompt>> {
    let family: PromptFamily = family.parse()?;
    Ok(template(family)
        .prompts
        .into_iter()
        .map(|p| Prompt {
            index: p.index,
            title: p.title.to_string(),
            text: format!("{}: {}\nSubject: {}", p.title, p.body, subject),
        })
        .collect())
}
