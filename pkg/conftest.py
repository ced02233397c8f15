import os
import sys
import tempfile

import pytest

# Модули лежат в корне репозитория и импортируются по имени (import mapping).
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

# Один поток: результаты от числа потоков не зависят, а тесты быстрее стартуют.
os.environ["EVIGRID_THREADS"] = "1"


@pytest.fixture(scope="session", autouse=True)
def _session_tmpdir():
    # CLI пишет config.json и выходные файлы по относительным путям, поэтому
    # вся тестовая сессия работает из пустого временного каталога. Каталог
    # меняется после сбора тестов, чтобы testpaths и --ignore разрешались
    # относительно корня репозитория.
    os.chdir(tempfile.mkdtemp(prefix="evigrid-tests-"))
    yield
