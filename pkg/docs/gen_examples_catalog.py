"""
Collects the code examples of the package docstrings into a single page,
one section per module in reading order.
"""

from inspect import getmembers, isclass, isfunction
from pathlib import Path
from textwrap import dedent
from types import ModuleType
from typing import Callable, List, Union

import mkdocs_gen_files
from griffe.dataclasses import Docstring
from griffe.docstrings.dataclasses import DocstringSectionKind
from griffe.docstrings.parsers import Parser, parse
from prefect.logging.loggers import disable_logger
from prefect.utilities.importtools import load_module, to_qualified_name

COLLECTION_SLUG = "prefect_fracdrift"

# pipeline order rather than alphabetical
MODULES = (
    "geometry",
    "fractional_core",
    "drift_fields",
    "green_spectral",
    "first_integrals",
    "kernel_series",
    "mc_validator",
    "config",
    "flows",
    "utilities",
)


def is_documented_member(name: str, obj: Union[type, Callable], module: str) -> bool:
    """Public objects defined in `module` that carry a docstring."""
    try:
        defined_here = to_qualified_name(obj).startswith(module)
    except AttributeError:
        defined_here = False
    return defined_here and obj.__doc__ is not None and not name.startswith("_")


def code_examples(obj: Union[ModuleType, Callable]) -> List[str]:
    """The `Example:` sections of a Google docstring."""
    with disable_logger("griffe.docstrings.google"):
        with disable_logger("griffe.agents.nodes"):
            sections = parse(Docstring(obj.__doc__ or ""), Parser.google)
    return [
        "\n".join(part[1] for part in section.as_dict().get("value", []))
        for section in sections
        if section.kind == DocstringSectionKind.examples
    ]


def module_examples(module_name: str) -> List[str]:
    qualified = f"{COLLECTION_SLUG}.{module_name}"
    module = load_module(qualified)
    examples = code_examples(module)
    members = getmembers(module, lambda obj: isclass(obj) or isfunction(obj))
    for name, obj in members:
        if not is_documented_member(name, obj, qualified):
            continue
        examples.extend(code_examples(obj))
        if isclass(obj):
            for method_name, method in getmembers(obj, isfunction):
                if is_documented_member(method_name, method, qualified):
                    examples.extend(code_examples(method))
    # a flow re-exported from another module would otherwise appear twice
    return list(dict.fromkeys(examples))


examples_catalog_path = Path("examples_catalog.md")
with mkdocs_gen_files.open(examples_catalog_path, "w") as generated_file:
    generated_file.write(dedent("""
            # Examples Catalog

            Below is a list of examples for `prefect-fracdrift`, grouped by module.
            """))
    for module_name in MODULES:
        examples = module_examples(module_name)
        if not examples:
            continue
        module_title = module_name.replace("_", " ").title()
        generated_file.write(
            f"## [{module_title} Module][{COLLECTION_SLUG}.{module_name}]\n"
        )
        for example in examples:
            generated_file.write(example + "\n")
