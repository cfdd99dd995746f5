from .parsing import (
    Action,
    AgentEntry,
    AgentJsonResponse,
    CotAction,
    CotActionList,
    ParseError,
    SchemaError,
    extract_json_object,
    final_answer_of,
    parse_agent_json,
    parse_natural_reasoning,
    parse_summary_cot,
)
from .registry import (
    EXPERTISE,
    HEADINGS,
    ROLES,
    TASKS,
    MissingSlotError,
    TaskSpec,
    TemplateError,
    TemplateId,
    UnknownSlotError,
    format_examples,
    get_task,
    perspective_block,
    render,
    render_sft,
    render_sub_question,
    render_x_ra,
    render_zero_shot,
    template_body,
    template_slots,
)

__all__ = [
    "Action", "AgentEntry", "AgentJsonResponse", "CotAction", "CotActionList", "ParseError", "SchemaError",
    "extract_json_object", "final_answer_of", "parse_agent_json", "parse_natural_reasoning", "parse_summary_cot",
    "EXPERTISE", "HEADINGS", "ROLES", "TASKS", "MissingSlotError", "TaskSpec", "TemplateError", "TemplateId",
    "UnknownSlotError", "format_examples", "get_task", "perspective_block", "render", "render_sft",
    "render_sub_question", "render_x_ra", "render_zero_shot", "template_body", "template_slots",
]
