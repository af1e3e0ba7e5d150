import json

import numpy as np
import pytest

from metastab.cli import build_parser, run
from metastab.frames import FrameSequence, load_sequence, save_sequence
from metastab.session_manager import load_parameters, merge_parameters, save_parameters
from metastab.synthesis import SynthesisNet
from metastab.synthetic import render_procedural_scene


@pytest.fixture
def static_dir(tmp_path):
    frame = render_procedural_scene(1, 32, 32, seed=2, sprites=0, margin=0.0).canvas[0]
    save_sequence(FrameSequence(np.repeat(frame[None], 32, axis=0)), tmp_path / 'static')
    return tmp_path / 'static'


@pytest.fixture
def tiny_model(tmp_path):
    net = SynthesisNet(k=1, base_width=2)
    return save_parameters(merge_parameters(net=net.init_parameters()), tmp_path / 'model.mstb')


def test_usage_errors_exit_2(capsys):
    assert run([]) == 2
    assert run(['stabilize']) == 2
    assert run(['teleport']) == 2
    assert run(['--precision', 'float16', 'evaluate', '--original', 'a', '--stabilized', 'b', '--out', 'c']) == 2
    assert run(['stabilize', '--model', 'm', '--video', 'v', '--out', 'o', '--adapt-samples', '0']) == 2


def test_help_lists_every_subcommand():
    text = build_parser().format_help()
    for name in ('synth-data', 'train-affine', 'meta-train', 'stabilize', 'evaluate', 'ablate'):
        assert name in text


def test_runtime_error_is_one_json_line(tmp_path, capsys):
    code = run(['evaluate', '--original', str(tmp_path / 'missing'), '--stabilized', str(tmp_path),
                '--out', str(tmp_path / 'report.json')])
    assert code == 1
    lines = capsys.readouterr().err.strip().splitlines()
    record = json.loads(lines[-1])
    assert record['error'] == 'FrameSequenceError'
    assert record['subcommand'] == 'evaluate'


def test_invalid_precision_in_config_is_a_runtime_error(tmp_path, static_dir, capsys):
    config = tmp_path / 'settings.toml'
    config.write_text('[runtime]\nprecision = "float16"\n')
    code = run(['--config', str(config), 'evaluate', '--original', str(static_dir),
                '--stabilized', str(static_dir), '--out', str(tmp_path / 'r.json')])
    assert code == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])['error'] == 'ConfigError'


def test_evaluate_static_video_against_itself(tmp_path, static_dir, capsys):
    out = tmp_path / 'report.json'
    assert run(['--no-progress', 'evaluate', '--original', str(static_dir), '--stabilized', str(static_dir),
                '--out', str(out)]) == 0
    report = json.loads(out.read_text())
    assert (report['stability'], report['cropping'], report['distortion']) == (1.0, 1.0, 1.0)
    assert capsys.readouterr().out.count('✅') == 3
    manifest = json.loads((tmp_path / 'report.json.manifest.json').read_text())
    assert manifest['subcommand'] == 'evaluate'


def test_synth_data_layout(tmp_path):
    out = tmp_path / 'data'
    assert run(['--seed', '3', 'synth-data', '--out', str(out), '--videos', '2', '--frames', '6',
                '--height', '32', '--width', '32', '--sprites', '1']) == 0
    assert sorted(p.name for p in out.iterdir()) == ['manifest.json', 'video_000', 'video_001']
    video = out / 'video_000'
    assert len(load_sequence(video / 'unstable')) == 6
    assert len(load_sequence(video / 'stable')) == 6
    assert len(json.loads((video / 'transforms.json').read_text())['frames']) == 6
    assert json.loads((video / 'profile.json').read_text())['seed'] == 3000
    assert json.loads((out / 'manifest.json').read_text())['seed'] == 3


def test_synth_data_is_reproducible(tmp_path):
    args = ['synth-data', '--videos', '1', '--frames', '4', '--height', '32', '--width', '32']
    assert run(args + ['--out', str(tmp_path / 'a')]) == 0
    assert run(args + ['--out', str(tmp_path / 'b')]) == 0
    a = json.loads((tmp_path / 'a' / 'manifest.json').read_text())['outputs']['files']
    b = json.loads((tmp_path / 'b' / 'manifest.json').read_text())['outputs']['files']
    assert sorted(a.values()) == sorted(b.values())


def test_stabilize_without_adaptation_copies_frames(tmp_path, static_dir, tiny_model):
    out = tmp_path / 'stable'
    assert run(['stabilize', '--model', str(tiny_model), '--video', str(static_dir), '--out', str(out),
                '--adapt-steps', '0']) == 0
    np.testing.assert_array_equal(load_sequence(out).data, load_sequence(static_dir).data)
    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['extra']['k'] == 1 and manifest['extra']['tasks'] == 0


def test_stabilize_rejects_mismatched_k(tmp_path, static_dir, tiny_model, capsys):
    code = run(['stabilize', '--model', str(tiny_model), '--video', str(static_dir),
                '--out', str(tmp_path / 'o'), '--k', '2'])
    assert code == 1
    assert 'k=1' in json.loads(capsys.readouterr().err.strip().splitlines()[-1])['message']


def test_meta_train_end_to_end(tmp_path):
    data = tmp_path / 'data'
    assert run(['synth-data', '--out', str(data), '--videos', '1', '--frames', '8',
                '--height', '32', '--width', '32', '--sprites', '0', '--translation-std', '0.5']) == 0
    model = tmp_path / 'model.mstb'
    assert run(['--no-progress', 'meta-train', '--data', str(data), '--out', str(model), '--arch', 'difrint',
                '--steps', '1', '--meta-batch', '1', '--frames-per-task', '2', '--patch', '32',
                '--base-width', '2', '--alpha', '1e-3', '--beta', '1e-3']) == 0
    arrays = load_parameters(model)
    assert arrays['net.enc1.w'].shape == (2, 9, 3, 3)
    log = [json.loads(line) for line in (tmp_path / 'model.mstb.jsonl').read_text().splitlines()]
    assert log[0]['event'] == 'step'


def test_ablate_requires_baseline_for_finetune(tmp_path, tiny_model, capsys):
    code = run(['ablate', '--model', str(tiny_model), '--data', str(tmp_path), '--out', str(tmp_path / 's.json'),
                '--experiments', 'finetune'])
    assert code == 1
    assert 'baseline' in json.loads(capsys.readouterr().err.strip().splitlines()[-1])['message']


def _synth(tmp_path, frames, size=32):
    data = tmp_path / 'data'
    assert run(['synth-data', '--out', str(data), '--videos', '1', '--frames', str(frames), '--height', str(size),
                '--width', str(size), '--sprites', '0', '--translation-std', '0.5']) == 0
    return data


def test_meta_train_resumes_from_newest_checkpoint(tmp_path):
    data = _synth(tmp_path, 8)
    config = tmp_path / 'settings.toml'
    config.write_text('[meta]\ncheckpoint_every = 1\n')
    model = tmp_path / 'model.mstb'
    common = ['--no-progress', '--config', str(config), 'meta-train', '--data', str(data), '--out', str(model),
              '--arch', 'difrint', '--meta-batch', '1', '--frames-per-task', '2', '--patch', '32',
              '--base-width', '2', '--alpha', '1e-3', '--beta', '1e-3', '--checkpoint-dir', str(tmp_path / 'ckpt')]
    assert run(common + ['--steps', '2']) == 0
    assert run(common + ['--steps', '3', '--resume']) == 0
    log = [json.loads(line) for line in (tmp_path / 'model.mstb.jsonl').read_text().splitlines()]
    assert [r['step'] for r in log if r['event'] == 'step'] == [1, 2, 3]
    manifest = json.loads((tmp_path / 'model.mstb.manifest.json').read_text())
    assert manifest['extra']['resumed_from']['filename'] == 'checkpoint_step000002.mstb'


@pytest.mark.parametrize('flags, message', [
    (['--resume'], '--checkpoint-dir'),
    (['--resume', '--conventional', '--checkpoint-dir', 'ckpt'], 'conventional'),
])
def test_resume_misuse_is_a_config_error(tmp_path, capsys, flags, message):
    code = run(['meta-train', '--data', str(tmp_path), '--out', str(tmp_path / 'm.mstb')] + flags)
    assert code == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record['error'] == 'ConfigError' and message in record['message']


def test_evaluate_reuses_flow_cache_until_stale(tmp_path, static_dir):
    from metastab.exporters import write_flow
    from metastab.flow import FlowField

    cache = tmp_path / 'flows'
    args = ['--no-progress', 'evaluate', '--original', str(static_dir), '--stabilized', str(static_dir),
            '--out', str(tmp_path / 'report.json'), '--flow-dir', str(cache)]
    assert run(args) == 0
    assert len(list(cache.glob('*.msfl'))) == 31
    assert json.loads((tmp_path / 'report.json').read_text())['stability'] == 1.0

    # a cached 1 px pan between two frames shows up in the path
    ones = np.ones((32, 32), np.float32)
    write_flow(cache / '000010.msfl', FlowField(ones, np.zeros_like(ones), ones))
    assert run(args) == 0
    assert json.loads((tmp_path / 'report.json').read_text())['stability'] < 1.0

    manifest = json.loads((cache / 'manifest.json').read_text())
    manifest['inputs']['combined'] = '0' * 40
    (cache / 'manifest.json').write_text(json.dumps(manifest))
    assert run(args) == 0
    assert json.loads((tmp_path / 'report.json').read_text())['stability'] == 1.0


def test_dataset_sidecar_must_cover_every_frame(tmp_path):
    from metastab.cli import load_dataset
    from metastab.errors import FrameSequenceError

    data = _synth(tmp_path, 6)
    assert [name for name, _, _ in load_dataset(data, with_stable=False)] == ['video_000']
    sidecar = data / 'video_000' / 'transforms.json'
    record = json.loads(sidecar.read_text())
    record['frames'] = record['frames'][:-1]
    sidecar.write_text(json.dumps(record))
    with pytest.raises(FrameSequenceError, match='5 transforms for 6 frames'):
        load_dataset(data, with_stable=False)


def test_ablate_trend_and_finetune(tmp_path, tiny_model):
    data = _synth(tmp_path, 32, size=48)
    config = tmp_path / 'settings.toml'
    config.write_text('[meta]\nframes_per_task = 2\npatch = 32\ninference_patch = 32\n\n'
                      '[losses]\nfeature_widths = [4, 8]\n')
    out = tmp_path / 'summary.json'
    assert run(['--no-progress', '--config', str(config), 'ablate', '--model', str(tiny_model), '--data', str(data),
                '--out', str(out), '--experiments', 'trend,finetune', '--baseline', str(tiny_model),
                '--videos', '1', '--tasks', '2', '--adapt-samples', '1']) == 0
    summary = json.loads(out.read_text())
    assert [r['M'] for r in summary['adaptation_trend']['rows']] == [0, 1, 5]
    assert len(summary['meta_vs_finetune']['meta_gain']) == 2
    assert summary['meta_vs_finetune']['meta_wins_fraction'] == 0.0
    manifest = json.loads((tmp_path / 'summary.json.manifest.json').read_text())
    assert manifest['extra']['experiments'] == ['trend', 'finetune']
