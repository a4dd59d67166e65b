from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple


def arg(*flags, **kwargs):
    """One argparse argument: arg("--corpus", help=...)"""
    return flags, kwargs


@dataclass
class Command:
    name: str
    help: str
    handler: Callable
    arguments: List[Tuple[tuple, dict]] = field(default_factory=list)


class CommandRouter:
    """
    Collects subcommands of one group

    Handlers take (args, config) and return an exit code.
    """

    def __init__(self, tags=None):
        self.tags = tags or []
        self.commands: Dict[str, Command] = {}

    def command(self, name, help="", arguments=()):
        def decorator(func):
            self.commands[name] = Command(name=name, help=help, handler=func, arguments=list(arguments))
            return func
        return decorator
