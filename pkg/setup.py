import setuptools
import subprocess


if __name__ == '__main__':
    # noinspection PyBroadException
    try:
        cmd = ['git', 'rev-parse', '--short', 'HEAD']
        revision = '+' + subprocess.check_output(cmd).decode('ascii').rstrip()
    except:
        revision = ''

    setuptools.setup(
        name='tcr_align',
        version='1.0.0' + revision,
        packages=['tcr_align', 'tcr_align/core', 'tcr_align/io'],
        python_requires='>=3.8',
        install_requires=[
            'torch>=2.1',
            'numpy',
            'pillow',
            'pandas',
            'tomli-w',
            'tomli; python_version < "3.11"',
        ],
        entry_points={
            'console_scripts': ['tcr-align=tcr_align.cli:main'],
        },
    )
