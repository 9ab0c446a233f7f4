from __future__ import annotations

import asyncio
from collections.abc import Callable, Mapping


async def _gather[T](jobs: Mapping[str, Callable[[], T]]) -> dict[str, T]:
    async with asyncio.TaskGroup() as task_group:
        tasks = [
            task_group.create_task(asyncio.to_thread(job), name=name)
            for name, job in jobs.items()
        ]
    return {task.get_name(): task.result() for task in tasks}


def run_jobs[T](jobs: Mapping[str, Callable[[], T]]) -> dict[str, T]:
    """Run independent simulations in worker threads.

    Results keep the order of `jobs`. The first failure is re-raised on its
    own.
    """
    if not jobs:
        return {}

    try:
        results = asyncio.run(_gather(jobs))
    except ExceptionGroup as group:
        first = group.exceptions[0]
        while isinstance(first, ExceptionGroup):
            first = first.exceptions[0]
        raise first from None

    return {name: results[name] for name in jobs}
