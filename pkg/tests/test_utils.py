import logging
from pathlib import Path

import pytest

from uniseg_lab import utils
from uniseg_lab.errors import ConfigError
from uniseg_lab.schemas import config_schema


@pytest.mark.fast
def test_load_document_reads_yaml_and_json(tmp_path: Path) -> None:
    yml = tmp_path / 'a.yml'
    yml.write_text('loss_kind: CE\nmax_iters: 5\n', encoding='utf-8')
    assert utils.load_document(yml, config_schema.train_config_schema()) == {'loss_kind': 'CE', 'max_iters': 5}
    js = tmp_path / 'a.json'
    utils.write_json(js, {'loss_kind': 'CE'})
    assert utils.load_document(js) == {'loss_kind': 'CE'}


@pytest.mark.fast
def test_load_document_errors(tmp_path: Path) -> None:
    with pytest.raises(ConfigError):
        utils.load_document(tmp_path / 'missing.yml')
    broken = tmp_path / 'broken.yml'
    broken.write_text('a: [1, 2\n', encoding='utf-8')
    with pytest.raises(ConfigError):
        utils.load_document(broken)
    scalar = tmp_path / 'scalar.yml'
    scalar.write_text('42\n', encoding='utf-8')
    with pytest.raises(ConfigError):
        utils.load_document(scalar)


@pytest.mark.fast
def test_validate_reports_every_error() -> None:
    with pytest.raises(ConfigError) as info:
        utils.validate({'loss_kind': 'FOCAL', 'max_iters': 0, 'colour': 'red'},
                       config_schema.train_config_schema(), 'train.yml')
    message = str(info.value)
    assert message.startswith('Error! train.yml')
    assert 'loss_kind' in message and 'max_iters' in message and 'colour' in message


@pytest.mark.fast
def test_write_json_is_stable(tmp_path: Path) -> None:
    utils.write_json(tmp_path / 'a.json', {'b': 1, 'a': [1.5, None]})
    utils.write_json(tmp_path / 'b.json', {'a': [1.5, None], 'b': 1})
    assert (tmp_path / 'a.json').read_bytes() == (tmp_path / 'b.json').read_bytes()
    assert utils.read_json(tmp_path / 'a.json') == {'a': [1.5, None], 'b': 1}


@pytest.mark.fast
def test_csv_line_endings(tmp_path: Path) -> None:
    path = tmp_path / 'x.csv'
    utils.write_csv(path, ['a', 'b'], [[1, 'x'], [2, 'y']])
    assert path.read_bytes() == b'a,b\n1,x\n2,y\n'
    assert utils.read_csv(path) == [['a', 'b'], ['1', 'x'], ['2', 'y']]


@pytest.mark.fast
def test_resolve_threads(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(utils.THREADS_ENV_VAR, raising=False)
    assert utils.resolve_threads(None) == 1
    assert utils.resolve_threads(3) == 3
    monkeypatch.setenv(utils.THREADS_ENV_VAR, '4')
    assert utils.resolve_threads(None) == 4
    assert utils.resolve_threads(2) == 2
    monkeypatch.setenv(utils.THREADS_ENV_VAR, 'many')
    with pytest.raises(ConfigError):
        utils.resolve_threads(None)
    with pytest.raises(ConfigError):
        utils.resolve_threads(0)


@pytest.mark.fast
def test_setup_logging_writes_log_file(tmp_path: Path) -> None:
    utils.setup_logging(tmp_path, verbose=False)
    logging.getLogger('uniseg_lab.test').info('hello from the test')
    for handler in logging.getLogger('uniseg_lab').handlers:
        handler.flush()
    assert 'hello from the test' in (tmp_path / utils.LOG_FILE_NAME).read_text(encoding='utf-8')
