//! The full recipe table. Each row records its source, the benchmark task it
//! imitates, its task type, the sample count of the reference build, whether
//! an LLM generated it, and whether this crate can build it.

use crate::task::TaskType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecipeStatus {
    Implemented,
    /// LLM-generated rows; they need an external generator.
    RequiresGenerator,
    /// Deterministic rows whose source data or task definition is not
    /// available to this crate.
    SourceUnavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecipeInfo {
    pub id: u32,
    pub source: &'static str,
    pub task: &'static str,
    pub task_type: TaskType,
    pub size: u32,
    pub llm: bool,
    pub explanation: &'static str,
    pub status: RecipeStatus,
}

pub const RECIPE_VERSION: &str = "1";

use RecipeStatus::{Implemented as Imp, RequiresGenerator as Gen, SourceUnavailable as Na};
use TaskType::{
    Generation as Gn, MultipleChoice as Mc, NamedEntityRecognition as Ner, Ranking as Rk, Retrieval as Rt,
};

#[allow(clippy::too_many_arguments)]
const fn r(
    id: u32,
    source: &'static str,
    task: &'static str,
    task_type: TaskType,
    size: u32,
    llm: bool,
    explanation: &'static str,
    status: RecipeStatus,
) -> RecipeInfo {
    RecipeInfo {
        id,
        source,
        task,
        task_type,
        size,
        llm,
        explanation,
        status,
    }
}

pub const RECIPES: [RecipeInfo; 38] = [
    r(1, "Amazon-M2", "KDD Cup2024 Task 2", Mc, 2350, true, "Select product categories given product attributes", Gen),
    r(2, "Amazon Reviews 2023", "KDD Cup2024 Task 3", Rt, 7373, true, "Given a product type and sentiment, select 3 most likely snippet a customer would write about the product", Gen),
    r(3, "Amazon Reviews 2023", "KDD Cup2024 Task 7", Rt, 3608, true, "Given a product type and a review, select 3 aspects covered by the review", Gen),
    r(4, "Amazon Reviews 2023", "KDD Cup2024 Task 10", Mc, 10000, true, "Given a product type, which of the following categories complement the product type best?", Gen),
    r(5, "ESCI-data", "KDD Cup2024 Task 12", Rk, 16728, false, "", Imp),
    r(6, "Amazon Reviews 2023", "KDD Cup2024 Task 14", Rk, 5815, false, "Given a product title a customer will buy, which other product titles will he like", Na),
    r(7, "Amazon Reviews 2023", "KDD Cup2024 Task 15", Mc, 10000, false, "Given a product review, estimate the rating of the review", Imp),
    r(8, "ESCI-data", "KDD Cup2024 Task 16", Mc, 10000, false, "", Na),
    r(9, "Amazon-M2", "KDD Cup2024 Task 17", Gn, 10000, false, "", Na),
    r(10, "Amazon-M2", "KDD Cup2024 Task 18", Mc, 10000, false, "", Na),
    r(11, "NingLab/ECInstruct", "Attribute Value Extraction", Ner, 19622, true, "", Gen),
    r(12, "NingLab/ECInstruct", "Multiclass Product Classification", Mc, 10000, true, "", Gen),
    r(13, "NingLab/ECInstruct", "Product Relation Prediction", Mc, 10000, true, "", Gen),
    r(14, "NingLab/ECInstruct", "Query Product Rank", Rt, 10000, true, "", Gen),
    r(15, "NingLab/ECInstruct", "Sequential Recommendation", Mc, 10000, true, "", Gen),
    r(16, "NingLab/ECInstruct", "Answerability Prediction", Mc, 10000, false, "", Na),
    r(17, "NingLab/ECInstruct", "Product Matching", Mc, 4044, false, "", Na),
    r(18, "NingLab/ECInstruct", "Product Substitute Identification", Mc, 10000, false, "", Na),
    r(19, "NingLab/ECInstruct", "Sentiment Analysis", Mc, 10000, false, "", Na),
    r(20, "Amazon-M2", "New Idea", Gn, 10000, true, "Explain product type given title, description, and product type", Gen),
    r(21, "ESCI-data", "New Idea", Mc, 10000, true, "Select the user query that matches the product description", Gen),
    r(22, "ESCI-data", "New Idea", Mc, 10000, true, "Select the user query that matches the product features", Gen),
    r(23, "ESCI-data", "New Idea", Mc, 10000, true, "Select the user query that matches the product title", Gen),
    r(24, "ESCI-data", "New Idea", Mc, 10000, true, "Select the title for the product description", Gen),
    r(25, "ESCI-data", "New Idea", Mc, 10000, true, "Select the title for the product features", Gen),
    r(26, "ESCI-data", "New Idea", Mc, 10000, true, "Select the product title for the user query", Gen),
    r(27, "ESCI-data", "New Idea", Rt, 10000, false, "Pick 3 bullet points to match product", Na),
    r(28, "NingLab/ECInstruct", "New Idea", Rk, 5000, false, "Rank product reviews - positive to negative", Imp),
    r(29, "ESCI-data", "New Idea", Mc, 5435, false, "Pick product to match query", Imp),
    r(30, "ESCI-data", "New Idea", Rk, 5000, false, "Task12 backwards. Given product, rank queries", Imp),
    r(31, "KDD Cup 2023", "New Idea", Rt, 10000, false, "Given purchase pick previous clicks (similar to task 14)", Imp),
    r(32, "ESCI-data", "New Idea", Mc, 10000, false, "Given title pick brand", Imp),
    r(33, "ESCI-data", "New Idea", Mc, 10000, false, "Given query product pair, what is relationship? E S C I", Imp),
    r(34, "ESCI-data", "New Idea", Rk, 10000, false, "Given list of query product pairs, rank which are most related to least related", Imp),
    r(35, "ESCI-data", "New Idea", Rt, 10000, false, "Given query, select products which are exact match not substitute, complement, or irrelevent", Imp),
    r(36, "Amazon Reviews 2023", "New Idea", Rk, 10000, false, "Given a product title and multiple reviews, rank the reviews based on the helpfulness", Imp),
    r(37, "Alpaca Cleaned", "No Changes", Gn, 51760, false, "", Na),
    r(38, "MMLU", "No Changes", Mc, 115700, false, "", Na),
];

/// Sample count of the full reference build.
pub const REFERENCE_TOTAL: u32 = 502_435;

pub fn recipe(id: u32) -> Option<&'static RecipeInfo> {
    RECIPES.iter().find(|r| r.id == id)
}

pub fn implemented_ids() -> Vec<u32> {
    RECIPES
        .iter()
        .filter(|r| r.status == RecipeStatus::Implemented)
        .map(|r| r.id)
        .collect()
}
