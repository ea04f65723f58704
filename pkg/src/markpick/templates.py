"""Versioned prompt templates.

Any edit to the template text must bump TEMPLATE_VERSION: it participates in
cache keys, so stale cached replies are never served across template changes.
"""

TEMPLATE_VERSION = "v1"

SUBJECT_EXTRACTION_TEMPLATE = """\
You are given a referring expression that describes one target object in an image.
Identify the subject noun phrase or phrases being referred to, keeping the \
distinguishing feature attached to each subject where it helps tell objects apart.
Reply with a single line in which every subject phrase is followed by a space and \
a period. Examples of the reply format: `plant .` or `teddy bear . checkered design .`
Do not add any other text.

Expression: {expression}"""

CHOICE_SELECTION_TEMPLATE = """\
The attached image shows candidate objects. Each candidate is outlined and labeled \
with a numeric mark drawn at the center of its box.
Select the single candidate that best matches this description: "{expression}"
Answer with exactly one bracketed mark index out of {bracket_list}, and nothing else. \
Example answer: [1]"""
