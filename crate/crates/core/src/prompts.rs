//! Prompt templates and fixed protocol sentences.
//!
//! Templates use `{name}` placeholders filled by [`fill`] in a single pass,
//! so values containing brace text are inserted verbatim.

use alloc::string::String;

use crate::protocol::{PromptMode, TaskFamily};

/// Label that precedes the usable part of a summarizer response.
pub const SUMMARY_LABEL: &str = "**Final Information**";

/// Substring that identifies a summarizer refusal.
pub const FALLBACK_MARKER: &str = "exceeds the capabilities of a search engine";

/// Refusal sentence the summarizer is instructed to return for
/// reasoning-type queries.
pub const FALLBACK_SUMMARY: &str = "This query requires design, computation, or complex reasoning, which exceeds the capabilities of a search engine. Please input another query or proceed with direct reasoning.";

/// Visible sentence appended right after a documents block that carried a
/// refusal.
pub const FALLBACK_NOTICE: &str = "It seems that this query exceeds the capabilities of the retrieval system. We may consider rephrasing it into a more fact-based and searchable question that does not require complex reasoning, or proceed with direct reasoning based on prior knowledge.";

/// Replaces each `{key}` in `template` with its value. Unknown placeholders
/// are left as they are.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = tail.find('}').and_then(|close| {
            let key = &tail[1..close];
            vars.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

const MCQ_RETRIEVAL: &str = "You are solving a multiple-choice question. Analyze each option carefully and logically. Think step by step: consider the meaning and implications of each option, eliminate incorrect ones with clear reasoning, and select the best answer through comparison.

During your reasoning, if you're unsure about any fact, you may issue a search query like this:
<|begin_of_query|> your concise query (less than 20 words) <|end_of_query|>

- You can issue multiple queries at different steps in your reasoning.
- Each query must target only one fact or statement. Do not combine multiple ideas in a single query.
- Examples:
  - Good: <|begin_of_query|> What are the common symptoms of pneumonia? <|end_of_query|>
  - Good: <|begin_of_query|> What is the typical treatment for pneumonia in elderly patients? <|end_of_query|>
  - Bad: <|begin_of_query|> What are the symptoms and treatments for pneumonia in elderly patients? <|end_of_query|>
- You may issue at most four queries in total -- use them wisely.

Once documents are returned in this format:
<|begin_of_documents|> ... (search results here) <|end_of_documents|>

Use the retrieved documents to verify, reject, or revise your prior reasoning about the options.
Then continue analyzing the options until you're confident in your answer.

Final answer format:
the correct answer is: A, B, C, D, etc. (only the letter corresponding to the correct option)

Question: {question}
";

const MATH_RETRIEVAL: &str = "You are solving a math problem. Think step by step to solve it.

The reasoning process includes detailed considerations such as analyzing questions, summarizing relevant findings, brainstorming new ideas, verifying the accuracy of current steps, refining any errors, and revisiting previous steps.

During your reasoning, if you're unsure about a factual concept -- such as a definition, formula, theorem, or mathematical constant -- you may issue a search query to clarify it.

Format your query using the following template (each query must target only one fact):

<|begin_of_query|> your concise query (less than 20 words) <|end_of_query|>

Examples:
- <|begin_of_query|> Definition of Möbius function <|end_of_query|>
- <|begin_of_query|> Formula for variance of Bernoulli distribution <|end_of_query|>

Do NOT query for reasoning-related content like:
- Whether a solution approach is valid
- How to compute a specific value
- Multi-step deductions or conclusions

You may issue at most four search queries per problem -- use them wisely.

When documents are returned in this format:
<|begin_of_documents|>
... (search results here)
<|end_of_documents|>

Use the evidence to confirm or revise your reasoning. Then continue analyzing the question until you're confident in the answer.

At the end of your reasoning, give your final answer in the following format:
\\boxed{YOUR_ANSWER}

Question: {question}
";

const QA_RETRIEVAL: &str = "You are solving a factual open-domain question from a Knowledge Question Answering (KQA) task. The question requires step-by-step reasoning over real-world knowledge to identify a specific, factually correct answer.

Carefully analyze the question to understand the key entities, relationships, and constraints involved. Retrieve and consider relevant factual knowledge, and reason logically to identify the most accurate answer.

During your reasoning, if you're unsure about any fact, you may issue a search query like this:
<|begin_of_query|> your concise query (less than 20 words) <|end_of_query|>

- You can issue multiple queries at different steps in your reasoning.
- Each query must target only one fact or statement. Do not combine multiple ideas in a single query.
  - Example:
    - <|begin_of_query|> When did Einstein move to the United States? <|end_of_query|>
    - <|begin_of_query|> Why did Einstein leave Germany? <|end_of_query|>
  - Do not combine them like this:
    - <|begin_of_query|> When did Einstein move to the US and why did he leave Germany? <|end_of_query|>
- You may issue at most five queries in total -- use them wisely.

Once documents are returned in this format:
<|begin_of_documents|>
... (search results here)
<|end_of_documents|>

Use the evidence to confirm or revise your reasoning. Then continue analyzing the question until you're confident in the answer.

At the end of your reasoning, give your final answer in the following format:
\\boxed{YOUR_ANSWER}

Question: {question}
";

const MCQ_DIRECT: &str = "You are solving a multiple-choice question. Think step by step and use careful reasoning.
For each question, analyze all options one by one. For each option:
- Consider its meaning and implications.
- Evaluate whether it is correct or incorrect, and explain why.
- Eliminate incorrect options with clear, logical reasoning.
After analyzing all options, compare the remaining ones and choose the best answer.

At the end of your reasoning, give your final answer in the following format:
the correct answer is: A, B, C, D, etc. (only the letter corresponding to the correct option).

Question: {question}
";

const MATH_DIRECT: &str = "Please answer the following math question. You should think step by step to solve it.

Provide your final answer in the format \\boxed{YOUR_ANSWER}.

Question: {question}
";

const QA_DIRECT: &str = "{question}

Please reason step by step, and put your final answer within \\boxed{}.
";

/// Prompt template for a task family and prompt mode.
pub fn task_template(family: TaskFamily, mode: PromptMode) -> &'static str {
    match (family, mode) {
        (TaskFamily::Mcq, PromptMode::Retrieval) => MCQ_RETRIEVAL,
        (TaskFamily::Math, PromptMode::Retrieval) => MATH_RETRIEVAL,
        (TaskFamily::OpenQa, PromptMode::Retrieval) => QA_RETRIEVAL,
        (TaskFamily::Mcq, PromptMode::Direct) => MCQ_DIRECT,
        (TaskFamily::Math, PromptMode::Direct) => MATH_DIRECT,
        (TaskFamily::OpenQa, PromptMode::Direct) => QA_DIRECT,
    }
}

pub fn task_prompt(family: TaskFamily, mode: PromptMode, question: &str) -> String {
    fill(task_template(family, mode), &[("question", question)])
}

/// Which summarizer instructions to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryDomain {
    Math,
    General,
}

/// Training variants add a query-classification step that may return the
/// refusal sentence; evaluation variants always summarize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryPhase {
    Train,
    Eval,
}

const SUMMARY_MATH_EVAL: &str = "Task Instruction:

You are assisting in solving a math problem. You are tasked with reading and analyzing Wikipedia content based on the following inputs: Previous Reasoning Steps, Current Search Query, and Wikipedia Content. Your task is to extract accurate and relevant information from the provided Wikipedia content to support or enhance the reasoning process.

- Carefully read the provided Wikipedia Content;
- Extract factual information that can:
  - Directly assist in answering the Current Search Query, or
  - Help validate, complete, or correct earlier reasoning steps.
- The extracted information should be:
  - Accurate and trustworthy;
  - Closely relevant to the query;
  - Helpful in improving, expanding, or supporting the mathematical reasoning.

Important:
Do NOT attempt to correct or rewrite the previous reasoning. Treat it only as contextual reference that may be flawed.

Output Format:

Present the information beginning with the label **Final Information** as shown below.

**Final Information**
[Helpful factual information]

Inputs:
- Previous Reasoning Steps: {prev_reasoning}
- Current Search Query: {search_query}
- Wikipedia Content: {wikipedia_content}
";

const SUMMARY_MATH_TRAIN: &str = "Task Instruction:

You are assisting in solving a math problem. Your task is to determine whether the current query requires external factual knowledge (such as definitions, formulas, theorems, or lookup values), and if so, extract accurate and relevant information from the provided Wikipedia content to support or enhance the reasoning process.

Step 1: Classify the Query Type

Determine whether the query falls into one of the following categories:

- Knowledge-based query: Can be directly answered using factual knowledge.
- Reasoning-based query: Requires multi-step deduction, logical reasoning, or constructive computation.

If reasoning-based, return:
This query requires design, computation, or complex reasoning, which exceeds the capabilities of a search engine. Please input another query or proceed with direct reasoning.

Step 2: Analyze Knowledge-Based Queries (if applicable)

- Carefully read the Wikipedia Content;
- Extract factual information that:
  - Directly assists the query, or
  - Helps validate, complete, or correct earlier reasoning.
- Ensure information is accurate, relevant, and objective.

Do NOT attempt to correct prior reasoning. Treat it as possibly flawed context.

Output Format:

**Final Information**
[Helpful factual information, or the non-knowledge-based response]

Inputs:
- Previous Reasoning Steps: {prev_reasoning}
- Current Search Query: {search_query}
- Wikipedia Content: {wikipedia_content}
";

const SUMMARY_GENERAL_EVAL: &str = "Task Instruction:

You are tasked with reading and analyzing Wikipedia content based on the following inputs: Previous Reasoning Steps, Current Search Query, and Wikipedia Content. Your objective is to extract factual and relevant information from the Wikipedia Content that directly supports or informs the Current Search Query, and integrate it into the reasoning process in an objective and helpful manner.

Guidelines:

- Analyze Wikipedia Content:
  - Read carefully.
  - Identify factual info directly related to the query.
- Maintain Objectivity:
  - Do not validate or revise prior reasoning.
  - Use it as flawed context.

Output Format:

**Final Information**
[Helpful information]

Inputs:
- Previous Reasoning Steps: {prev_reasoning}
- Current Search Query: {search_query}
- Wikipedia Content: {wikipedia_content}
";

const SUMMARY_GENERAL_TRAIN: &str = "Task Instruction:

Your first task is to determine whether the provided query is a knowledge-based query that can be answered using factual information from Wikipedia, or if it requires design, computation, or complex reasoning.

Step 1: Query Classification
- If knowledge-based (e.g., facts, definitions, history), proceed to Step 2.
- Otherwise, return:
This query requires design, computation, or complex reasoning, which exceeds the capabilities of a search engine. Please input another query or proceed with direct reasoning.

Step 2: Analyze Knowledge-Based Queries

- Read Wikipedia content;
- Extract relevant factual information;
- Stay neutral---do not alter previous reasoning;

Output Format:

**Final Information**
[Helpful information or the non-knowledge-based response]

Inputs:
- Previous Reasoning Steps: {prev_reasoning}
- Current Search Query: {search_query}
- Wikipedia Content: {wikipedia_content}
";

pub fn summary_template(domain: SummaryDomain, phase: SummaryPhase) -> &'static str {
    match (domain, phase) {
        (SummaryDomain::Math, SummaryPhase::Eval) => SUMMARY_MATH_EVAL,
        (SummaryDomain::Math, SummaryPhase::Train) => SUMMARY_MATH_TRAIN,
        (SummaryDomain::General, SummaryPhase::Eval) => SUMMARY_GENERAL_EVAL,
        (SummaryDomain::General, SummaryPhase::Train) => SUMMARY_GENERAL_TRAIN,
    }
}

pub fn summary_prompt(
    domain: SummaryDomain,
    phase: SummaryPhase,
    prev_reasoning: &str,
    search_query: &str,
    content: &str,
) -> String {
    fill(
        summary_template(domain, phase),
        &[
            ("prev_reasoning", prev_reasoning),
            ("search_query", search_query),
            ("wikipedia_content", content),
        ],
    )
}

pub const JUDGE_MATH: &str = "Instruction:

You are an expert math evaluator.
Given a question, a gold answer and a predicted answer, judge if they are mathematically consistent.

Ignore formatting (e.g., \\text{}, spacing, capitalization).
Accept equivalent expressions (e.g., factored vs expanded form).
If the prediction matches only part of a multi-part answer (e.g., one of several intervals or roots), label it as Partially correct.

Output format:
- Reason: Brief explanation
- Judgment: Correct / Partially correct / Incorrect

Input:
- Question: {question}
- Gold: {gold}
- Pred: {pred}
";

pub const JUDGE_QA: &str = "Instruction:

Given a Question and its Golden Answer, verify whether the Predicted Answer is correct.
The prediction is correct if it fully aligns with the meaning and key information of the Golden Answer.
Respond with True if the prediction is correct and False otherwise.

Input:
- Question: {question}
- Golden Answer: {gold_answer}
- Predicted Answer: {predicted_answer}

Your response should be exactly \"True\" or \"False\"
";
