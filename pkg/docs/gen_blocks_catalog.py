"""
Generates the Blocks Catalog page: every block registered by `prefect_fracdrift`,
its description, its fields and its code example.
"""

from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Type

import mkdocs_gen_files
from prefect.blocks.core import Block
from prefect.utilities.dispatch import get_registry_for_type
from prefect.utilities.importtools import to_qualified_name

import prefect_fracdrift  # noqa: F401

PACKAGE = "prefect_fracdrift"


def blocks_by_module() -> Dict[str, List[Type[Block]]]:
    """Groups the package's registered blocks by defining module, sorted by name."""
    grouped = defaultdict(list)
    for block in get_registry_for_type(Block).values():
        qualified = to_qualified_name(block)
        if qualified.startswith(PACKAGE + "."):
            grouped[qualified.rsplit(".", 1)[0]].append(block)
    return {
        module: sorted(blocks, key=lambda block: block.__name__)
        for module, blocks in sorted(grouped.items())
    }


def field_rows(block: Type[Block]) -> List[str]:
    """One markdown table row per block field."""
    rows = []
    for name, model_field in block.__fields__.items():
        description = model_field.field_info.description or ""
        rows.append(f"| `{name}` | {description} |")
    return rows


def render_block(block: Type[Block], module: str) -> str:
    """The catalog section of one block."""
    description = block.get_description() or ""
    lines = [
        f"### [{block.__name__}][{module}.{block.__name__}]",
        "",
        description.rstrip(".") + ".",
        "",
        "| Field | Description |",
        "|---|---|",
        *field_rows(block),
        "",
    ]
    example = block.get_code_example()
    if example:
        lines += [example.strip(), ""]
    return "\n".join(lines) + "\n"


with mkdocs_gen_files.open(Path("blocks_catalog.md"), "w") as generated_file:
    generated_file.write(
        "# Blocks Catalog\n\n"
        "Register the blocks of `prefect-fracdrift` with\n\n"
        f"```bash\nprefect block register -m {PACKAGE}\n```\n\n"
        "A saved run configuration is loaded by name and passed to any flow.\n\n"
    )
    for module, blocks in blocks_by_module().items():
        title = module.rsplit(".", 1)[-1].replace("_", " ").title()
        generated_file.write(f"## {title} Module\n\n")
        for block in blocks:
            generated_file.write(render_block(block, module))
